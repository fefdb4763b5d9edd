"""sim.py — Euler–Maruyama and Milstein paths of dX = theta a(X) dt + b(X) dW.

Paths are observed at t_k = k/n for 0 <= k <= N = floor(n^(1+alpha)).
Every replicate owns one counter-based Philox stream seeded by
derive_seed(master, index), so a path depends only on (model, scheme,
method, seed) and never on how replicates are grouped or scheduled.
"""

import io
import json
import logging
import math
import pathlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from artifacts import atomic_write, config_line
from errors import DomainError, InvalidScheme, NumericalBlowup
from expr import Const, compile_expr, differentiate

_logger = logging.getLogger("driftmle.sim")

METHODS = ("euler", "milstein")
GENERATOR_ID = "numpy.random.Philox+SeedSequence/standard_normal-ziggurat"
BLOWUP_THRESHOLD = 1e12
FD_STEP = 1e-7
DEFAULT_BLOCK = 4096           # observations per yielded block
MAX_STEPS = 10 ** 9

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


# ── Observation scheme ───────────────────────────────────────────────────────

def observation_count(n, alpha):
    """N = floor(n^(1+alpha)), exact when n^(1+alpha) is an integer."""
    v = float(n) ** (1.0 + alpha)
    r = round(v)
    if abs(v - r) <= 1e-9 * max(v, 1.0):
        return int(r)
    return int(math.floor(v))


@dataclass(frozen=True)
class ObservationScheme:
    n: int
    alpha: float
    substeps: int = 1

    def __post_init__(self):
        if isinstance(self.n, bool) or not isinstance(self.n, (int, np.integer)) or self.n < 1:
            raise InvalidScheme(f"n must be a positive integer, got {self.n!r}")
        if not 0.0 < float(self.alpha) < 1.0:
            raise InvalidScheme(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if isinstance(self.substeps, bool) or not isinstance(self.substeps, (int, np.integer)) \
                or self.substeps < 1:
            raise InvalidScheme(f"substeps must be a positive integer, got {self.substeps!r}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "substeps", int(self.substeps))
        if self.N * self.substeps > MAX_STEPS:
            raise InvalidScheme(f"N*substeps = {self.N * self.substeps} exceeds {MAX_STEPS}")

    @classmethod
    def from_counts(cls, n, alpha, substeps=1):
        """Build from loosely typed values (config numbers like 1000.0)."""
        def _int(name, v):
            if isinstance(v, float) and v.is_integer():
                return int(v)
            if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
                return int(v)
            raise InvalidScheme(f"{name} must be an integer, got {v!r}")
        return cls(_int("n", n), float(alpha), _int("substeps", substeps))

    @property
    def N(self):
        return observation_count(self.n, self.alpha)

    @property
    def delta(self):
        return 1.0 / self.n

    @property
    def step(self):
        """Internal step h = delta / substeps."""
        return self.delta / self.substeps

    @property
    def horizon(self):
        return self.N / self.n

    def times(self):
        return np.arange(self.N + 1) / self.n

    def to_dict(self):
        return {"n": self.n, "alpha": self.alpha, "substeps": self.substeps,
                "N": self.N, "horizon": self.horizon}


# ── Seeds and normal streams ─────────────────────────────────────────────────

def _mix64(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master, replicate_index):
    """SplitMix64 finalizer of master + (index + 1) * golden gamma.

    The finalizer is a bijection on 64 bits and the gamma is odd, so distinct
    indices below 2^64 always give distinct seeds.
    """
    return _mix64((int(master) + (int(replicate_index) + 1) * _GOLDEN) & _MASK64)


def normal_stream(seed):
    """Per-path generator; standard_normal draws are consumed strictly in order."""
    return np.random.Generator(np.random.Philox(int(seed) & _MASK64))


# ── Stepping ─────────────────────────────────────────────────────────────────

class _Stepper:
    """One Euler or Milstein update applied to a vector of replicates."""

    def __init__(self, model, method):
        if method not in METHODS:
            raise InvalidScheme(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
        self.method = method
        self.theta = model.theta
        self.a = model.a_fn
        self.b = model.b_fn
        self.bprime = None
        self.fallback_steps = 0
        if method == "milstein":
            deriv = differentiate(model.b)
            if not (isinstance(deriv, Const) and deriv.value == 0.0):
                self.bprime = compile_expr(deriv)

    def _bprime(self, x):
        try:
            return self.bprime(x)
        except DomainError:
            # kink of abs() or similar on the path
            self.fallback_steps += 1
            return (self.b(x + FD_STEP) - self.b(x - FD_STEP)) / (2.0 * FD_STEP)

    def __call__(self, x, z, h, sqrt_h):
        b = self.b(x)
        with np.errstate(over="ignore", invalid="ignore"):
            x_new = x + self.theta * self.a(x) * h + b * sqrt_h * z
            if self.bprime is not None:
                x_new = x_new + 0.5 * b * self._bprime(x) * h * (z * z - 1.0)
        return x_new


class SimBlock(NamedTuple):
    values: np.ndarray          # (rows, batch) observations
    alive: np.ndarray           # (batch,) replicates still finite
    failures: dict              # batch position -> NumericalBlowup, new in this block
    fallback_steps: int         # cumulative finite-difference b' steps


def integrate_batch(model, method, seeds, step, steps, record_every=1, block=DEFAULT_BLOCK):
    """Step every replicate `steps` times with step size `step`.

    Yields SimBlock objects; the first block starts with the initial value,
    then every `record_every`-th state is recorded. A replicate whose |X|
    exceeds BLOWUP_THRESHOLD is frozen at its last finite value and reported
    once in `failures`.
    """
    if steps % record_every:
        raise InvalidScheme(f"{steps} steps is not a multiple of {record_every}")
    stepper = _Stepper(model, method)
    gens = [normal_stream(s) for s in seeds]
    batch = len(gens)
    h = float(step)
    sqrt_h = math.sqrt(h)
    x = np.full(batch, model.x0)
    alive = np.ones(batch, dtype=bool)
    observations = steps // record_every
    done = 0
    first = True
    while done < observations or first:
        rows = min(block, observations - done)
        lead = 1 if first else 0
        out = np.empty((rows + lead, batch))
        if first:
            out[0] = x
        failures = {}
        z = np.empty((rows * record_every, batch))
        for j, g in enumerate(gens):
            z[:, j] = g.standard_normal(rows * record_every)
        for r in range(rows):
            for s in range(record_every):
                x_new = stepper(x, z[r * record_every + s], h, sqrt_h)
                bad = alive & ~(np.abs(x_new) <= BLOWUP_THRESHOLD)
                if np.any(bad):
                    index = (done + r) * record_every + s + 1
                    for pos in np.flatnonzero(bad):
                        failures[int(pos)] = NumericalBlowup(index, float(x_new[pos]))
                        _logger.warning("replicate seed=%d blew up at step %d (X=%r)",
                                        seeds[pos], index, float(x_new[pos]))
                    alive &= ~bad
                x = np.where(alive, x_new, x)
            out[lead + r] = x
        done += rows
        first = False
        yield SimBlock(out, alive.copy(), failures, stepper.fallback_steps)
    if stepper.fallback_steps:
        _logger.warning("finite-difference b' used on %d steps", stepper.fallback_steps)


def simulate_batch(model, scheme, method, seeds, block=DEFAULT_BLOCK):
    """Observed blocks for several replicates stepped together."""
    return integrate_batch(model, method, seeds, scheme.step, scheme.N * scheme.substeps,
                           record_every=scheme.substeps, block=block)


# ── Single paths ─────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class ObservedPath:
    scheme: ObservationScheme
    values: np.ndarray
    seed: int
    scheme_name: str
    fingerprint: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.values) != self.scheme.N + 1:
            raise InvalidScheme(f"path has {len(self.values)} values, "
                                f"scheme needs N+1 = {self.scheme.N + 1}")

    @property
    def times(self):
        return self.scheme.times()

    def header(self):
        return {"fingerprint": self.fingerprint, "scheme": self.scheme.to_dict(),
                "seed": self.seed, "method": self.scheme_name, "metadata": self.metadata}


def simulate_path(model, scheme, method="milstein", seed=0, block=DEFAULT_BLOCK):
    """One materialized path; raises NumericalBlowup instead of freezing."""
    parts = []
    fallback = 0
    for blk in simulate_batch(model, scheme, method, [seed], block):
        if blk.failures:
            raise blk.failures[0]
        parts.append(blk.values[:, 0])
        fallback = blk.fallback_steps
    values = np.concatenate(parts)
    metadata = {"generator": GENERATOR_ID, "block": block,
                "bprime_fallback_steps": fallback, "model": model.to_dict()}
    return ObservedPath(scheme, values, int(seed), method, model.fingerprint(), metadata)


# ── Path files ───────────────────────────────────────────────────────────────

def save_path(path, file, config=None):
    """Write `path` as CSV (k,t,x) or, for a .npz suffix, as a numpy archive."""
    file = pathlib.Path(file)
    header = json.dumps(path.header(), sort_keys=True)
    if file.suffix == ".npz":
        buf = io.BytesIO()
        np.savez(buf, values=path.values, header=np.array(header),
                 config=np.array(json.dumps(config or {}, sort_keys=True)))
        return atomic_write(file, buf.getvalue())
    k = np.arange(len(path.values))
    buf = io.StringIO()
    if config is not None:
        buf.write(config_line(config) + "\n")
    buf.write(f"# path={header}\n")
    buf.write("k,t,x\n")
    np.savetxt(buf, np.column_stack([k, k / path.scheme.n, path.values]),
               fmt=["%d", "%.17g", "%.17g"], delimiter=",")
    return atomic_write(file, buf.getvalue())


def load_path(file):
    file = pathlib.Path(file)
    if file.suffix == ".npz":
        with np.load(file, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            values = np.array(data["values"], dtype=float)
    else:
        header = None
        skip = 0
        with file.open(encoding="utf-8") as fh:
            for line in fh:
                skip += 1
                if line.startswith("# path="):
                    header = json.loads(line[len("# path="):])
                elif not line.startswith("#"):
                    break
        if header is None:
            raise InvalidScheme(f"{file}: no '# path=' header line")
        values = np.loadtxt(file, delimiter=",", skiprows=skip, usecols=2, ndmin=1)
    sch = header["scheme"]
    scheme = ObservationScheme(sch["n"], sch["alpha"], sch["substeps"])
    return ObservedPath(scheme, values, int(header["seed"]), header["method"],
                        header["fingerprint"], header.get("metadata", {}))
