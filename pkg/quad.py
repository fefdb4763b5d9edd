"""quad.py — adaptive Gauss–Kronrod quadrature on finite intervals and on the real line.

Integrands are called with a numpy array of abscissae and must return an
array of the same shape; scalar-only callables are detected and evaluated
point by point. Everything here is a pure function and reentrant.
"""

import heapq
import logging
import math
from dataclasses import dataclass

import numpy as np

from errors import BudgetExceeded, NonFiniteValue, SuspectedDivergent

_logger = logging.getLogger("driftmle.quad")

DEFAULT_REL_TOL = 1e-10
DEFAULT_ABS_TOL = 1e-12
DEFAULT_BUDGET = 1_000_000
REAL_LINE_R0 = 8.0
REAL_LINE_R_MAX = 2.0 ** 14
GROWTH_STREAK = 3          # consecutive growing increments that count as divergence

# 15-point Kronrod abscissae on [0, 1]; the odd entries are the 7-point Gauss nodes.
_XGK = np.array([
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
])

# Full 15-node rule laid out as [-x_0 .. -x_6, 0, x_6 .. x_0].
_NODES = np.concatenate([-_XGK[:-1], [0.0], _XGK[-2::-1]])
_KRONROD_W = np.concatenate([_WGK[:-1], [_WGK[-1]], _WGK[-2::-1]])
_GAUSS_W = np.zeros(15)
_GAUSS_W[[1, 3, 5]] = _WG[:3]
_GAUSS_W[7] = _WG[3]
_GAUSS_W[[9, 11, 13]] = _WG[2::-1]

_EPS = np.finfo(float).eps
_TINY = np.finfo(float).tiny


@dataclass(frozen=True)
class QuadResult:
    value: float
    abs_error_estimate: float
    converged: bool
    evaluations: int
    suspected_divergent: bool = False
    radius: float = 0.0            # last truncation radius (real-line integrals only)

    def to_dict(self):
        return {
            "value": self.value,
            "abs_error_estimate": self.abs_error_estimate,
            "converged": self.converged,
            "evaluations": self.evaluations,
            "suspected_divergent": self.suspected_divergent,
            "radius": self.radius,
        }


def _tolerance(value, rel_tol, abs_tol):
    return max(abs_tol, rel_tol * abs(value))


def _call(f, xs):
    """Evaluate f on a node array, falling back to a scalar loop."""
    try:
        out = np.asarray(f(xs), dtype=float)
    except TypeError:
        out = None
    if out is None or out.shape != xs.shape:
        out = np.array([float(f(float(x))) for x in xs])
    bad = ~np.isfinite(out)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise NonFiniteValue(float(xs[i]), float(out[i]))
    return out


def gauss_kronrod(f, a, b):
    """One G7–K15 panel on [a, b]: (value, error estimate, integral of |f|)."""
    half = 0.5 * (b - a)
    center = 0.5 * (a + b)
    fx = _call(f, center + half * _NODES)
    resk = float(np.dot(_KRONROD_W, fx))
    resg = float(np.dot(_GAUSS_W, fx))
    resabs = float(np.dot(_KRONROD_W, np.abs(fx)))
    resasc = float(np.dot(_KRONROD_W, np.abs(fx - 0.5 * resk)))
    value = resk * half
    resabs *= abs(half)
    resasc *= abs(half)
    err = abs((resk - resg) * half)
    if resasc != 0.0 and err != 0.0:
        err = resasc * min(1.0, (200.0 * err / resasc) ** 1.5)
    if resabs > _TINY / (50.0 * _EPS):
        err = max(50.0 * _EPS * resabs, err)
    return value, err, resabs


def integrate(f, a, b, rel_tol=DEFAULT_REL_TOL, abs_tol=DEFAULT_ABS_TOL,
              budget=DEFAULT_BUDGET, strict=False):
    """Adaptive bisection driven by the panel with the largest error estimate.

    Nodes never touch the endpoints, so integrable endpoint singularities are
    tolerated. Returns a QuadResult; converged=False when the evaluation
    budget runs out (BudgetExceeded is raised instead when strict=True).
    """
    a, b = float(a), float(b)
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError(f"integration limits must be finite, got [{a}, {b}]")
    if not a < b:
        raise ValueError(f"integration limits must satisfy a < b, got [{a}, {b}]")

    value, err, _ = gauss_kronrod(f, a, b)
    evaluations = 15
    heap = [(-err, a, b, value, err)]
    total, total_err = value, err
    stuck = False

    while total_err > _tolerance(total, rel_tol, abs_tol):
        if evaluations + 30 > budget:
            break
        _, lo, hi, v, e = heapq.heappop(heap)
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            # panel at floating-point resolution; cannot be refined
            heapq.heappush(heap, (0.0, lo, hi, v, e))
            stuck = True
            break
        v1, e1, _ = gauss_kronrod(f, lo, mid)
        v2, e2, _ = gauss_kronrod(f, mid, hi)
        evaluations += 30
        heapq.heappush(heap, (-e1, lo, mid, v1, e1))
        heapq.heappush(heap, (-e2, mid, hi, v2, e2))
        total += v1 + v2 - v
        total_err += e1 + e2 - e

    total = math.fsum(item[3] for item in heap)
    total_err = math.fsum(item[4] for item in heap)
    converged = total_err <= _tolerance(total, rel_tol, abs_tol)
    result = QuadResult(total, total_err, converged, evaluations)
    if not converged:
        why = "panel resolution reached" if stuck else "evaluation budget exhausted"
        _logger.warning("quadrature on [%g, %g] not converged (%s): value=%.12g err=%.3g",
                        a, b, why, total, total_err)
        if strict:
            raise BudgetExceeded(result)
    return result


def integrate_real_line(f, rel_tol=DEFAULT_REL_TOL, abs_tol=DEFAULT_ABS_TOL,
                        budget=DEFAULT_BUDGET, r0=REAL_LINE_R0, r_max=REAL_LINE_R_MAX,
                        raise_on_divergence=True):
    """Integrate over the real line by truncating to [-R, R] and doubling R.

    Stops once a doubling changes the value by less than the tolerance.
    Increments that keep growing, a non-finite integrand in the tails, or
    reaching r_max without convergence flag the integral as suspected
    divergent. The flag is a heuristic, not a proof.
    """
    core = integrate(f, -r0, r0, rel_tol, abs_tol, budget)
    value, err, evaluations = core.value, core.abs_error_estimate, core.evaluations
    converged_panels = core.converged
    radius = r0
    prev_inc = None
    streak = 0
    reason = ""

    while True:
        if radius >= r_max:
            reason = f"increment did not shrink below tolerance by R={r_max:g}"
            break
        try:
            left = integrate(f, -2.0 * radius, -radius, rel_tol, abs_tol, budget)
            right = integrate(f, radius, 2.0 * radius, rel_tol, abs_tol, budget)
        except NonFiniteValue as exc:
            reason = f"integrand not finite at x={exc.x:g}"
            radius *= 2.0
            break
        radius *= 2.0
        inc = left.value + right.value
        value += inc
        err += left.abs_error_estimate + right.abs_error_estimate
        evaluations += left.evaluations + right.evaluations
        converged_panels = converged_panels and left.converged and right.converged
        if abs(inc) <= _tolerance(value, rel_tol, abs_tol):
            result = QuadResult(value, err, converged_panels, evaluations,
                                suspected_divergent=False, radius=radius)
            if not converged_panels:
                _logger.warning("real-line quadrature: some panels did not converge "
                                "(value=%.12g)", value)
            return result
        streak = streak + 1 if prev_inc is not None and abs(inc) > abs(prev_inc) else 0
        prev_inc = inc
        if streak >= GROWTH_STREAK:
            reason = f"increment grew {streak} doublings in a row"
            break

    result = QuadResult(value, err, False, evaluations,
                        suspected_divergent=True, radius=radius)
    _logger.info("real-line quadrature flagged divergent at R=%g: %s", radius, reason)
    if raise_on_divergence:
        raise SuspectedDivergent(result, reason)
    return result
