"""est.py — the discretized MLE of theta from observations at t_k = k/n.

    theta_hat = sum_{k=1..N} c(X_{k-1}) dX_k / (n^-1 sum_{k=1..N} d(X_{k-1}))

Both sums use the left endpoint and run over k = 1..N.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from errors import DegenerateDenominator
from model import DiffusionModel, derive
from sim import DEFAULT_BLOCK

_logger = logging.getLogger("driftmle.est")

DENOMINATOR_FLOOR = 1e-300
SUMMATION = "k=1..N"
CSV_HEADER = ("seed", "n", "alpha", "method", "theta_hat", "Dn", "N_used")


class CompensatedSum:
    """Neumaier running sums, one per replicate.

    Blocks are first reduced with numpy's pairwise summation along each
    replicate's row, then folded into the compensated total.
    """

    def __init__(self, size=1):
        self.total = np.zeros(size)
        self.comp = np.zeros(size)

    def add(self, values):
        values = np.asarray(values, dtype=float)
        t = self.total + values
        big = np.abs(self.total) >= np.abs(values)
        self.comp += np.where(big, (self.total - t) + values, (values - t) + self.total)
        self.total = t

    def add_block(self, block):
        """Add a (rows, size) block."""
        self.add(np.ascontiguousarray(np.asarray(block, dtype=float).T).sum(axis=1))

    @property
    def value(self):
        return self.total + self.comp


@dataclass(frozen=True)
class EstimateResult:
    theta_hat: float
    numerator: float
    denominator_Dn: float
    denominator_raw: float
    N_used: int
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {"theta_hat": self.theta_hat, "numerator": self.numerator,
                "denominator_Dn": self.denominator_Dn,
                "denominator_raw": self.denominator_raw,
                "N_used": self.N_used, "metadata": self.metadata}

    def csv_row(self, seed, scheme, method):
        return [seed, scheme.n, scheme.alpha, method, repr(self.theta_hat),
                repr(self.denominator_Dn), self.N_used]


class EstimatorAccumulator:
    """Streaming numerator and denominator sums for a batch of replicates.

    Feed consecutive (rows, batch) blocks of observations; the first block
    must start with X_0. The last row of each block is kept as the left
    endpoint of the next increment.
    """

    def __init__(self, a, b, scheme, size=1):
        self._derived = derive(DiffusionModel(a, b))
        self.scheme = scheme
        self.numerator = CompensatedSum(size)
        self.denominator = CompensatedSum(size)
        self.count = 0
        self._last = None

    def feed(self, block):
        block = np.asarray(block, dtype=float)
        if block.ndim == 1:
            block = block[:, None]
        if self._last is None:
            left, right = block[:-1], block[1:]
        else:
            left = np.concatenate([self._last[None, :], block[:-1]])
            right = block
        self._last = block[-1].copy()
        if len(right) == 0:
            return
        c = self._derived.c(left)
        self.numerator.add_block(c * (right - left))
        self.denominator.add_block(self._derived.d(left))
        self.count += len(right)

    def result(self, pos=0):
        """EstimateResult for replicate `pos`."""
        n, alpha = self.scheme.n, self.scheme.alpha
        num = float(self.numerator.value[pos])
        s_d = float(self.denominator.value[pos])
        raw = s_d / n
        if not raw > DENOMINATOR_FLOOR:
            raise DegenerateDenominator(raw)
        return EstimateResult(num / raw, num, s_d * n ** (-1.0 - alpha), raw, self.count,
                              {"summation": SUMMATION, "compensation": "neumaier"})


def _blocks(values, block):
    yield values[:block + 1]
    for start in range(block + 1, len(values), block):
        yield values[start:start + block]


def estimate(path, model_coeffs, block=None):
    """theta_hat and diagnostics for a stored path.

    Blocks are cut at the same places as in simulate_batch, so the result
    matches the streamed estimate of the same replicate.
    """
    a, b = model_coeffs
    if block is None:
        block = path.metadata.get("block", DEFAULT_BLOCK)
    acc = EstimatorAccumulator(a, b, path.scheme, 1)
    for chunk in _blocks(np.asarray(path.values, dtype=float), block):
        acc.feed(chunk)
    if acc.count != path.scheme.N:
        raise ValueError(f"path supplied {acc.count} increments, expected N={path.scheme.N}")
    res = acc.result(0)
    _logger.debug("estimate seed=%s: theta_hat=%.10g Dn=%.10g", path.seed, res.theta_hat,
                  res.denominator_Dn)
    return EstimateResult(res.theta_hat, res.numerator, res.denominator_Dn,
                          res.denominator_raw, res.N_used,
                          dict(res.metadata, seed=path.seed, method=path.scheme_name))


def standardized_error(result, theta_true, info, scheme):
    """n^(alpha/2) (theta_hat - theta) sqrt(info), asymptotically N(0, 1)."""
    if not info > 0.0:
        raise ValueError(f"info must be positive, got {info!r}")
    return scheme.n ** (scheme.alpha / 2.0) * (result.theta_hat - theta_true) * math.sqrt(info)
