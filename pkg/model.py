"""model.py — the diffusion dX = theta a(X) dt + b(X) dW and its analytic companions.

Derived objects:
    c(x)   = a(x) / b(x)^2
    d(x)   = a(x)^2 / b(x)^2
    phi(x) = exp(-2 theta C(x)),   C(x) = int_0^x c(y) dy
    Phi(x) = int_0^x phi(y) dy
    mu(x)  = 1 / (G b(x)^2 phi(x)),   G = int_R dx / (b^2 phi)

The assumption validators are numeric heuristics over a finite probe grid.
They report what they saw (with witnesses); they do not prove anything.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.interpolate import CubicHermiteSpline

import quad
from errors import (AssumptionFailure, DegenerateDiffusion, DomainError, NonFiniteValue,
                    NonPositiveInfo, QuadratureError, SuspectedDivergent)
from expr import as_expr, compile_expr, render

_logger = logging.getLogger("driftmle.model")

ASSUMPTION_IDS = ("A1", "A2", "A3", "A4", "A5", "A6", "C7")
PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"

# Primitive cache layout: uniform nodes on [-CACHE_INNER, CACHE_INNER], then
# geometric nodes (ratio 1 + 1/CACHE_GEOMETRIC) out to CACHE_OUTER.
CACHE_INNER = 64.0
CACHE_NODES = 2 ** 14
CACHE_GEOMETRIC = 128
CACHE_OUTER = 2.0 ** 15

A1_REFINEMENT_RATIO = 1.5
A2_GROWTH_FACTOR = 1e3
A2_R0 = 1.0
A4_STABILITY_RATIO = 1.5
A5_ORDERS = tuple(range(2, 17, 2))
A6_MIN_DRIFT = 1e-12
C7_EPSILON = 1e-9
C7_PERSISTENCE = 0.75
INFO_FLOOR = 1e-12


# ── Model ────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DiffusionModel:
    """Coefficients a, b (Expr), true drift parameter theta, initial value x0."""

    a: object
    b: object
    theta: float = 1.0
    x0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "a", as_expr(self.a))
        object.__setattr__(self, "b", as_expr(self.b))
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "x0", float(self.x0))

    @classmethod
    def from_strings(cls, a, b, theta, x0):
        return cls(as_expr(a), as_expr(b), theta, x0)

    @classmethod
    def from_config(cls, cfg):
        return cls.from_strings(cfg["a"], cfg["b"], cfg["theta"], cfg["x0"])

    def with_theta(self, theta):
        return DiffusionModel(self.a, self.b, theta, self.x0)

    def to_dict(self):
        return {"a": render(self.a), "b": render(self.b),
                "theta": self.theta, "x0": self.x0}

    def fingerprint(self):
        """Stable hash of (a, b, theta, x0) for artifact headers."""
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    @cached_property
    def a_fn(self):
        return compile_expr(self.a)

    @cached_property
    def b_fn(self):
        return compile_expr(self.b)


def _b_squared(model, x):
    """b(x)^2, raising DegenerateDiffusion where b vanishes."""
    b = np.asarray(model.b_fn(x), dtype=float)
    zero = b == 0.0
    if np.any(zero):
        where = np.broadcast_to(np.asarray(x, dtype=float), b.shape)[zero]
        raise DegenerateDiffusion(float(where.flat[0]) if where.size else float(x))
    return b * b


# ── Derived functions ────────────────────────────────────────────────────────

class _PrimitiveCache:
    """C(x) = int_0^x c on a fixed node set, cubic Hermite between nodes.

    Each node-to-node panel is integrated with one Kronrod rule; the node
    derivatives are exact values of c, so the interpolant is C^1.
    """

    def __init__(self, c):
        self._c = c
        inner = np.linspace(0.0, CACHE_INNER, CACHE_NODES // 2 + 1)
        n_outer = int(math.ceil(math.log(CACHE_OUTER / CACHE_INNER)
                                / math.log1p(1.0 / CACHE_GEOMETRIC)))
        outer = CACHE_INNER * (1.0 + 1.0 / CACHE_GEOMETRIC) ** np.arange(1, n_outer + 1)
        right = np.concatenate([inner, outer])
        left_values = self._cumulative(-right)
        right_values = self._cumulative(right)
        nodes = np.concatenate([-right[:0:-1], right])
        values = np.concatenate([left_values[:0:-1], right_values])
        slopes = np.asarray(c(nodes), dtype=float)
        self.lo, self.hi = float(nodes[0]), float(nodes[-1])
        self._edge = {self.lo: float(values[0]), self.hi: float(values[-1])}
        self._spline = CubicHermiteSpline(nodes, values, slopes, extrapolate=False)

    def _cumulative(self, pts):
        lo, hi = pts[:-1], pts[1:]
        half = 0.5 * (hi - lo)
        center = 0.5 * (hi + lo)
        xs = center[:, None] + half[:, None] * quad._NODES[None, :]
        fx = np.asarray(self._c(xs.ravel()), dtype=float).reshape(xs.shape)
        panels = (fx @ quad._KRONROD_W) * half
        return np.concatenate([[0.0], np.cumsum(panels)])

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.array(self._spline(x), dtype=float, ndmin=1)
        flat_x = x.reshape(-1)
        for i in np.flatnonzero((flat_x < self.lo) | (flat_x > self.hi)):
            xi = float(flat_x[i])
            edge = self.hi if xi > self.hi else self.lo
            tail = quad.integrate(self._c, min(edge, xi), max(edge, xi)).value
            out[i] = self._edge[edge] + (tail if xi > edge else -tail)
        return float(out[0]) if x.ndim == 0 else out.reshape(x.shape)


class DerivedFunctions:
    """c, d, phi, Phi for one model; immutable once built."""

    def __init__(self, model):
        self.model = model
        self.theta = model.theta

    def c(self, x):
        a = self.model.a_fn(x)
        return a / _b_squared(self.model, x)

    def d(self, x):
        a = self.model.a_fn(x)
        return a * (a / _b_squared(self.model, x))

    @cached_property
    def primitive(self):
        """C(x) = int_0^x c(y) dy (cached)."""
        return _PrimitiveCache(self.c)

    def log_phi(self, x):
        return -2.0 * self.theta * self.primitive(x)

    def phi(self, x):
        with np.errstate(over="ignore"):
            return np.exp(self.log_phi(x))

    def Phi(self, x):
        """Scale function int_0^x phi, by adaptive quadrature per point."""
        xs = np.asarray(x, dtype=float)
        out = np.empty(xs.shape)
        for idx, xi in np.ndenumerate(xs):
            xi = float(xi)
            if xi == 0.0:
                out[idx] = 0.0
            elif xi > 0.0:
                out[idx] = quad.integrate(self.phi, 0.0, xi).value
            else:
                out[idx] = -quad.integrate(self.phi, xi, 0.0).value
        return float(out) if out.ndim == 0 else out

    def speed(self, x):
        """Unnormalized invariant density 1 / (b^2 phi)."""
        with np.errstate(over="ignore"):
            return np.exp(-self.log_phi(x)) / _b_squared(self.model, x)


def derive(model):
    return DerivedFunctions(model)


# ── Invariant law ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class InvariantLaw:
    model: DiffusionModel
    derived: DerivedFunctions = field(repr=False)
    G: float
    info: float
    moments: dict
    G_result: quad.QuadResult = field(repr=False)

    def density(self, x):
        with np.errstate(over="ignore"):
            return (np.exp(-self.derived.log_phi(x) - math.log(self.G))
                    / _b_squared(self.model, x))

    def expectation(self, h, raise_on_divergence=True):
        """E h(xi) for a vectorized h, by real-line quadrature."""
        return quad.integrate_real_line(lambda x: h(x) * self.density(x),
                                        raise_on_divergence=raise_on_divergence)

    def moment(self, r):
        """E |xi|^r for even r (odd orders also work through |x|^r); inf when divergent."""
        if r in self.moments:
            return self.moments[r]
        res = self.expectation(lambda x: np.abs(x) ** r, raise_on_divergence=False)
        return math.inf if res.suspected_divergent else res.value

    @property
    def asymptotic_std(self):
        """Standard deviation of the limit law N(0, 1/E d(xi))."""
        return 1.0 / math.sqrt(self.info)

    def predicted_std(self, n, alpha):
        """n^(-alpha/2) / sqrt(E d(xi)), the predicted std of theta_hat."""
        return n ** (-alpha / 2.0) / math.sqrt(self.info)

    def to_dict(self):
        return {"G": self.G, "info": self.info,
                "asymptotic_std": self.asymptotic_std,
                "moments": {str(k): v for k, v in sorted(self.moments.items())},
                "G_quadrature": self.G_result.to_dict()}


def invariant_law(model, force=False, moment_orders=(2, 4)):
    """Normalizer, density, information E d(xi) and moments of the stationary law."""
    derived = derive(model)
    if not force:
        check = _check_a2(derived, ProbeGrid())
        if check.status == FAIL:
            raise AssumptionFailure(None, ["A2"])

    g = quad.integrate_real_line(derived.speed)
    if not g.value > 0.0:
        raise SuspectedDivergent(g, "normalizer is not positive")
    law = InvariantLaw(model, derived, g.value, 0.0, {}, g)
    info = law.expectation(derived.d).value
    if not info > INFO_FLOOR:
        raise NonPositiveInfo(info)
    moments = {r: law.moment(r) for r in moment_orders}
    _logger.debug("invariant law: G=%.12g info=%.12g", g.value, info)
    return InvariantLaw(model, derived, g.value, info, moments, g)


# ── Assumption checks ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ProbeGrid:
    radius: float = 50.0
    points: int = 10_000

    def grid(self):
        return np.linspace(-self.radius, self.radius, self.points)

    def refined(self, factor=2):
        return ProbeGrid(self.radius, (self.points - 1) * factor + 1)

    def doubled(self):
        return ProbeGrid(2.0 * self.radius, 2 * self.points)


@dataclass(frozen=True)
class AssumptionCheck:
    id: str
    status: str
    witness: str

    def to_dict(self):
        return {"id": self.id, "status": self.status, "witness": self.witness}


@dataclass(frozen=True)
class AssumptionReport:
    checks: tuple
    theta: float
    bounded_coefficients: bool = False
    probe: ProbeGrid = ProbeGrid()

    def status(self, aid):
        for chk in self.checks:
            if chk.id == aid:
                return chk.status
        raise KeyError(aid)

    def passed(self, *ids):
        return all(self.status(i) == PASS for i in (ids or ASSUMPTION_IDS))

    def failed_ids(self):
        return [chk.id for chk in self.checks if chk.status == FAIL]

    def applicable_results(self):
        """Which sufficient result (theorem or corollaries) covers this model."""
        out = []
        if self.passed("A1", "A2", "A3", "A4", "A5", "A6"):
            out.append("theorem")
        if self.theta > 0 and self.passed("A1", "A4", "A6", "C7"):
            out.append("corollary_positive")
        if self.passed("A1", "A2", "A3") and self.bounded_coefficients:
            out.append("corollary_bounded")
        return out

    def to_dict(self):
        return {
            "checks": [chk.to_dict() for chk in self.checks],
            "bounded_coefficients": self.bounded_coefficients,
            "applicable_results": self.applicable_results(),
            "probe": {"radius": self.probe.radius, "points": self.probe.points},
        }


def _lipschitz(model, probe):
    x = probe.grid()
    a = model.a_fn(x)
    b = model.b_fn(x)
    return float(np.max((np.abs(np.diff(a)) + np.abs(np.diff(b))) / np.diff(x)))


def _check_a1(model, probe):
    try:
        base = _lipschitz(model, probe)
        finer = [_lipschitz(model, probe.refined(f)) for f in (2, 4)]
        finer.append(_lipschitz(model, probe.doubled()))
    except DomainError as exc:
        return AssumptionCheck("A1", FAIL, f"coefficient not evaluable: {exc}")
    witness = (f"L~{base:.6g} (refined: {finer[0]:.6g}, {finer[1]:.6g}; "
               f"doubled probe: {finer[2]:.6g})")
    if not all(math.isfinite(v) for v in [base] + finer):
        return AssumptionCheck("A1", FAIL, witness)
    if base == 0.0:
        return AssumptionCheck("A1", PASS if max(finer) == 0.0 else FAIL, witness)
    stable = all(v / base < A1_REFINEMENT_RATIO for v in finer)
    return AssumptionCheck("A1", PASS if stable else FAIL, witness)


def _safe_Phi(derived, x):
    try:
        value = derived.Phi(x)
    except NonFiniteValue:
        return math.copysign(math.inf, x)
    return value if math.isfinite(value) else math.copysign(math.inf, x)


def check_lipschitz(model, probe=None):
    """The A1 check alone; simulation only needs this one."""
    return _check_a1(model, probe or ProbeGrid())


def _check_a2(derived, probe):
    r = probe.radius
    sides = []
    parts = []
    try:
        derived.primitive
        for sign in (1.0, -1.0):
            p0 = abs(_safe_Phi(derived, sign * A2_R0))
            p1 = abs(_safe_Phi(derived, sign * r))
            p2 = abs(_safe_Phi(derived, sign * 2.0 * r))
            grows = math.isinf(p1) or (p1 > A2_GROWTH_FACTOR * p0 and p2 > p1)
            sides.append(grows)
            parts.append(f"|Phi({sign * r:+g})|={p1:.4g}")
    except (DegenerateDiffusion, DomainError) as exc:
        return AssumptionCheck("A2", FAIL, str(exc))
    return AssumptionCheck("A2", PASS if all(sides) else FAIL, ", ".join(parts))


def _check_a3(derived):
    try:
        g = quad.integrate_real_line(derived.speed, raise_on_divergence=False)
    except (QuadratureError, DomainError, DegenerateDiffusion) as exc:
        return AssumptionCheck("A3", FAIL, str(exc)), None
    if g.suspected_divergent:
        return AssumptionCheck("A3", FAIL, f"G suspected divergent at R={g.radius:g}"), None
    if not g.converged:
        return AssumptionCheck("A3", INCONCLUSIVE, f"G~{g.value:.6g} (not converged)"), None
    return AssumptionCheck("A3", PASS, f"G={g.value:.10g} (R={g.radius:g})"), g.value


def _fit_inverse_b(model, probe):
    x = probe.grid()
    inv = 1.0 / np.sqrt(_b_squared(model, x))
    far = np.abs(x) >= 1.0
    slope = float(np.polyfit(np.log(np.abs(x[far])), np.log(inv[far]), 1)[0]) if np.any(far) else 0.0
    p = max(slope, 0.0)
    k = float(np.max(inv / (1.0 + np.abs(x) ** p)))
    return p, k


def _check_a4(model, probe):
    try:
        p, k = _fit_inverse_b(model, probe)
        wide = probe.doubled().grid()
        inv = 1.0 / np.sqrt(_b_squared(model, wide))
        k_wide = float(np.max(inv / (1.0 + np.abs(wide) ** p)))
    except (DegenerateDiffusion, DomainError) as exc:
        return AssumptionCheck("A4", FAIL, str(exc)), 0.0
    witness = f"p={p:.4g}, K={k:.6g} (doubled probe K={k_wide:.6g})"
    ok = math.isfinite(k_wide) and k_wide <= A4_STABILITY_RATIO * k
    return AssumptionCheck("A4", PASS if ok else FAIL, witness), p


def _check_a5(derived, g):
    if g is None:
        return AssumptionCheck("A5", INCONCLUSIVE, "needs a finite normalizer G (A3)")
    log_g = math.log(g)

    def density(x):
        with np.errstate(over="ignore"):
            return np.exp(-derived.log_phi(x) - log_g) / _b_squared(derived.model, x)

    last = None
    for r in A5_ORDERS:
        try:
            m = quad.integrate_real_line(lambda x: np.abs(x) ** r * density(x),
                                         raise_on_divergence=False)
        except (QuadratureError, DomainError) as exc:
            return AssumptionCheck("A5", FAIL, f"E|xi|^{r}: {exc}")
        if m.suspected_divergent:
            return AssumptionCheck("A5", FAIL, f"E|xi|^{r} suspected divergent")
        last = m.value
    return AssumptionCheck(
        "A5", PASS,
        f"E|xi|^r finite for r={A5_ORDERS[0]}..{A5_ORDERS[-1]} (E|xi|^{A5_ORDERS[-1]}={last:.4g}); "
        "higher orders not certified")


def _check_a6(model, probe):
    try:
        peak = float(np.max(np.abs(model.a_fn(probe.grid()))))
    except DomainError as exc:
        return AssumptionCheck("A6", FAIL, str(exc))
    return AssumptionCheck("A6", PASS if peak > A6_MIN_DRIFT else FAIL, f"max|a|={peak:.6g}")


def _outer_drift_sign(derived, probe):
    x = probe.grid()
    outer = np.abs(x) >= 0.9 * probe.radius
    xs = x[outer]
    return float(np.max(derived.c(xs) * np.sign(xs)))


def _check_c7(derived, probe):
    try:
        s = _outer_drift_sign(derived, probe)
        s_wide = _outer_drift_sign(derived, probe.doubled())
    except (DegenerateDiffusion, DomainError) as exc:
        return AssumptionCheck("C7", FAIL, str(exc))
    witness = f"sup c(x)sgn(x) on outer decade: {s:.6g} (doubled probe: {s_wide:.6g})"
    if s < -C7_EPSILON and s_wide <= C7_PERSISTENCE * s:
        return AssumptionCheck("C7", PASS, witness)
    if s < -C7_EPSILON:
        return AssumptionCheck("C7", INCONCLUSIVE, witness + "; margin shrinking toward 0")
    return AssumptionCheck("C7", FAIL, witness)


def _bounded(model, probe):
    try:
        x, wide = probe.grid(), probe.doubled().grid()
        a, b = np.abs(model.a_fn(x)), np.abs(model.b_fn(x))
        a2, b2 = np.abs(model.a_fn(wide)), np.abs(model.b_fn(wide))
    except DomainError:
        return False
    return bool(a2.max() <= 1.5 * a.max() + 1e-12
                and b2.max() <= 1.5 * b.max() + 1e-12
                and b2.min() > 1e-12)


def check_assumptions(model, probe=None):
    """Run the numeric A1–A6 and condition (7) checks; failures are reported, not raised."""
    probe = probe or ProbeGrid()
    derived = derive(model)
    checks = [_check_a1(model, probe)]
    try:
        checks.append(_check_a2(derived, probe))
        a3, g = _check_a3(derived)
    except (DegenerateDiffusion, DomainError) as exc:
        checks.append(AssumptionCheck("A2", FAIL, str(exc)))
        a3, g = AssumptionCheck("A3", FAIL, str(exc)), None
    checks.append(a3)
    a4, _ = _check_a4(model, probe)
    checks.append(a4)
    checks.append(_check_a5(derived, g))
    checks.append(_check_a6(model, probe))
    checks.append(_check_c7(derived, probe))
    report = AssumptionReport(tuple(checks), model.theta, _bounded(model, probe), probe)
    _logger.info("assumption check: %s",
                 ", ".join(f"{c.id}={c.status}" for c in report.checks))
    return report


# ── Growth bounds ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class GrowthBounds:
    M1: float       # |a| + |b| <= M1 (1 + |x|)
    M2: float       # |c| <= M2 (1 + |x|^(2p+1)),  |d| <= M2 (1 + |x|^(2p+2))
    p: float
    K: float        # 1/|b| <= K (1 + |x|^p)


def growth_constants(model, probe=None):
    """Fit the constants of the linear and polynomial growth bounds on the probe."""
    probe = probe or ProbeGrid()
    derived = derive(model)
    x = probe.grid()
    ax = np.abs(x)
    m1 = float(np.max((np.abs(model.a_fn(x)) + np.abs(model.b_fn(x))) / (1.0 + ax)))
    p, k = _fit_inverse_b(model, probe)
    m2 = float(max(np.max(np.abs(derived.c(x)) / (1.0 + ax ** (2 * p + 1))),
                   np.max(np.abs(derived.d(x)) / (1.0 + ax ** (2 * p + 2)))))
    return GrowthBounds(m1, m2, p, k)
