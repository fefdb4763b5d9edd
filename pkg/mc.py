"""mc.py — Monte Carlo experiments over (n, alpha) grids.

Replicate r of cell i (cells ordered n-major, then alpha) uses seed
derive_seed(master_seed, i * replicates + r). Replicates are simulated in
fixed-size batches on a thread pool and folded back in index order, so the
numbers do not depend on the thread count.
"""

import csv
import io
import json
import logging
import math
import pathlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from artifacts import atomic_write, config_line, dump_json
from errors import (AllReplicatesFailed, ConfigError, DegenerateDenominator, DegenerateDiffusion,
                    DomainError, InvalidScheme, NonPositiveInfo, QuadratureError)
from est import CompensatedSum, EstimatorAccumulator, standardized_error
from model import DiffusionModel, invariant_law
from sim import METHODS, ObservationScheme, derive_seed, integrate_batch, simulate_batch

_logger = logging.getLogger("driftmle.mc")

SCRIPT_DIR = pathlib.Path(__file__).resolve().parent
TABLES_DIR = SCRIPT_DIR / "tables"
REPLICATE_BATCH = 25
KS_COEFFICIENT = 1.36          # asymptotic 5% critical value is 1.36 / sqrt(m)
ERGODIC_BUDGET = 10 ** 9
TABLE_NS = (50, 100, 500, 1000, 2000, 5000)
TABLE_ALPHAS = (0.1, 0.5, 0.9)

OK, BLOWUP, DOMAIN_ERROR, DEGENERATE = "ok", "blowup", "domain_error", "degenerate"
REPLICATE_COLUMNS = ("case", "n", "alpha", "replicate", "seed", "theta_hat", "Dn",
                     "std_err", "status")


# ── Configuration & records ──────────────────────────────────────────────────

@dataclass(frozen=True)
class ExperimentConfig:
    model: DiffusionModel
    alphas: tuple
    ns: tuple
    replicates: int = 100
    method: str = "milstein"
    master_seed: int = 42
    substeps: int = 1
    case: str = ""

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "ns", tuple(int(n) for n in self.ns))
        if self.replicates < 2:
            raise ConfigError(f"need at least 2 replicates, got {self.replicates}",
                              "experiment.replicates")
        if not self.alphas or not self.ns:
            raise ConfigError("empty grid", "experiment.ns" if not self.ns else "experiment.alphas")
        for i, a in enumerate(self.alphas):
            if not 0.0 < a < 1.0:
                raise ConfigError(f"alpha must lie in (0, 1), got {a}", f"experiment.alphas[{i}]")
        if list(self.ns) != sorted(self.ns) or self.ns[0] < 1:
            raise ConfigError("ns must be positive and sorted ascending", "experiment.ns")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}", "scheme.method")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ConfigError("master_seed must be a 64-bit unsigned integer",
                              "experiment.master_seed")

    def cells(self):
        return [(n, a) for n in self.ns for a in self.alphas]


@dataclass(frozen=True)
class ReplicateRecord:
    case: str
    n: int
    alpha: float
    replicate: int
    seed: int
    theta_hat: float
    Dn: float
    std_err: float
    status: str
    error: str = ""

    def row(self):
        return [self.case, self.n, self.alpha, self.replicate, self.seed,
                repr(self.theta_hat), repr(self.Dn), repr(self.std_err), self.status]


@dataclass(frozen=True)
class CellSummary:
    n: int
    alpha: float
    mean_theta_hat: float
    std_theta_hat: float
    mean_Dn: float
    ks_statistic: float
    ks_pass_5pct: bool
    predicted_std: float
    failures: int
    replicates: int
    ref_mean: float = None
    ref_std: float = None

    def acceptance_band(self):
        """Allowed |mean - ref_mean| and std range, or None without reference values."""
        if self.ref_mean is None or self.ref_std is None:
            return None
        return {"mean_tol": max(0.35 * self.ref_std, 4.0 * self.ref_std / math.sqrt(100)),
                "std_lo": 0.6 * self.ref_std, "std_hi": 1.6 * self.ref_std}

    def within_band(self):
        band = self.acceptance_band()
        if band is None:
            return None
        return (abs(self.mean_theta_hat - self.ref_mean) <= band["mean_tol"]
                and band["std_lo"] <= self.std_theta_hat <= band["std_hi"])

    def to_dict(self):
        out = {k: getattr(self, k) for k in (
            "n", "alpha", "mean_theta_hat", "std_theta_hat", "mean_Dn", "ks_statistic",
            "ks_pass_5pct", "predicted_std", "failures", "replicates")}
        if self.ref_mean is not None:
            out.update(ref_mean=self.ref_mean, ref_std=self.ref_std,
                       acceptance_band=self.acceptance_band(), within_band=self.within_band())
        return out


@dataclass
class ExperimentResult:
    """Cells in grid order plus every replicate record; iterates over the cells."""

    cells: list
    records: list
    info: float
    config: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.cells)

    def __len__(self):
        return len(self.cells)

    def __getitem__(self, i):
        return self.cells[i]

    def to_dict(self):
        return {"config": self.config, "info": self.info,
                "cells": [c.to_dict() for c in self.cells]}

    def write_json(self, path):
        return atomic_write(path, dump_json(self.to_dict()))

    def write_csv(self, path):
        buf = io.StringIO()
        buf.write(config_line(self.config) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPLICATE_COLUMNS)
        for rec in self.records:
            w.writerow(rec.row())
        return atomic_write(path, buf.getvalue())

    def write_standardized_errors(self, path):
        buf = io.StringIO()
        buf.write(config_line(self.config) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("n", "alpha", "replicate", "std_err"))
        for rec in self.records:
            if rec.status == OK:
                w.writerow([rec.n, rec.alpha, rec.replicate, repr(rec.std_err)])
        return atomic_write(path, buf.getvalue())


# ── KS ───────────────────────────────────────────────────────────────────────

def ks_statistic(samples):
    """Kolmogorov–Smirnov distance between the samples and N(0, 1)."""
    x = np.sort(np.asarray(samples, dtype=float))
    m = len(x)
    if m == 0:
        raise ValueError("ks_statistic needs at least one sample")
    cdf = norm.cdf(x)
    i = np.arange(1, m + 1)
    return float(max(np.max(i / m - cdf), np.max(cdf - (i - 1) / m)))


def ks_critical_value(m):
    return KS_COEFFICIENT / math.sqrt(m)


# ── Experiment ───────────────────────────────────────────────────────────────

def _simulate_and_estimate(model, scheme, method, seeds):
    """(status, EstimateResult or None, error) per seed, stepped as one batch."""
    acc = EstimatorAccumulator(model.a, model.b, scheme, len(seeds))
    failures = {}
    for blk in simulate_batch(model, scheme, method, seeds):
        acc.feed(blk.values)
        failures.update(blk.failures)
    out = []
    for pos in range(len(seeds)):
        if pos in failures:
            out.append((BLOWUP, None, str(failures[pos])))
            continue
        try:
            out.append((OK, acc.result(pos), ""))
        except DegenerateDenominator as exc:
            out.append((DEGENERATE, None, str(exc)))
    return out


def _run_batch(model, scheme, method, seeds):
    try:
        return _simulate_and_estimate(model, scheme, method, seeds)
    except (DomainError, DegenerateDiffusion) as exc:
        if len(seeds) == 1:
            return [(DOMAIN_ERROR, None, str(exc))]
    # one bad replicate must not take its batch down
    out = []
    for seed in seeds:
        out.extend(_run_batch(model, scheme, method, [seed]))
    return out


def _mean_std(values):
    k = len(values)
    mean = math.fsum(values) / k
    if k < 2:
        return mean, 0.0
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (k - 1))


def _summarize(n, alpha, records, law, reference):
    ok = [r for r in records if r.status == OK]
    failures = len(records) - len(ok)
    if not ok:
        raise AllReplicatesFailed(n, alpha, failures)
    mean, std = _mean_std([r.theta_hat for r in ok])
    mean_dn = math.fsum(r.Dn for r in ok) / len(ok)
    if law is None:
        ks = predicted = math.nan
    else:
        ks = ks_statistic([r.std_err for r in ok])
        predicted = law.predicted_std(n, alpha)
    ref = (reference or {}).get((n, alpha))
    return CellSummary(
        n=n, alpha=alpha, mean_theta_hat=mean, std_theta_hat=std, mean_Dn=mean_dn,
        ks_statistic=ks, ks_pass_5pct=bool(ks < ks_critical_value(len(ok))),
        predicted_std=predicted, failures=failures, replicates=len(ok),
        ref_mean=ref[0] if ref else None, ref_std=ref[1] if ref else None)


def run_experiment(config, threads=1, force=False, reference=None, law=None, echo=None):
    """Simulate, estimate and summarize every (n, alpha) cell of `config`.

    `reference` maps (n, alpha) to the published (mean, std) of that cell.
    Returns an ExperimentResult whose iteration yields the CellSummary list.
    With `force`, a model without a usable invariant law still runs; its
    standardized errors, KS statistics and predicted stds are NaN.
    """
    model = config.model
    if law is None:
        try:
            law = invariant_law(model, force=force)
        except (QuadratureError, NonPositiveInfo) as exc:
            if not force:
                raise
            _logger.warning("invariant law unavailable (%s); standardized errors, "
                            "KS and predicted std are NaN", exc)
    cells = config.cells()
    schemes = [ObservationScheme(n, a, config.substeps) for n, a in cells]
    tasks = []
    for ci in range(len(cells)):
        for start in range(0, config.replicates, REPLICATE_BATCH):
            stop = min(start + REPLICATE_BATCH, config.replicates)
            idx = range(ci * config.replicates + start, ci * config.replicates + stop)
            tasks.append((ci, start, [derive_seed(config.master_seed, g) for g in idx]))

    _logger.info("experiment: %d cells x %d replicates, %d batches on %d threads",
                 len(cells), config.replicates, len(tasks), threads)
    t0 = time.time()
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        futures = [pool.submit(_run_batch, model, schemes[ci], config.method, seeds)
                   for ci, _, seeds in tasks]
        outcomes = [f.result() for f in futures]

    records, summaries = [], []
    by_cell = {ci: [] for ci in range(len(cells))}
    for (ci, start, seeds), outcome in zip(tasks, outcomes):
        by_cell[ci].extend(zip(range(start, start + len(seeds)), seeds, outcome))
    for ci, (n, alpha) in enumerate(cells):
        cell_records = []
        for r, seed, (status, res, err) in by_cell[ci]:
            if res is None:
                theta_hat = dn = std_err = math.nan
            else:
                theta_hat, dn = res.theta_hat, res.denominator_Dn
                std_err = (standardized_error(res, model.theta, law.info, schemes[ci])
                           if law is not None else math.nan)
            cell_records.append(ReplicateRecord(config.case, n, alpha, r, seed, theta_hat,
                                                dn, std_err, status, err))
        summary = _summarize(n, alpha, cell_records, law, reference)
        _logger.info("cell n=%d alpha=%g: mean=%.6g std=%.6g failures=%d",
                     n, alpha, summary.mean_theta_hat, summary.std_theta_hat, summary.failures)
        records.extend(cell_records)
        summaries.append(summary)
    _logger.info("experiment finished in %.1fs", time.time() - t0)
    return ExperimentResult(summaries, records, law.info if law is not None else math.nan,
                            echo or {})


# ── Oracles and diagnostics ──────────────────────────────────────────────────

def ergodic_average(model, h, horizon, dt, seed, paths=1, method="euler"):
    """(1/T) sum_i h(X_{i dt}) dt along simulated paths, averaged over `paths`."""
    steps = int(round(horizon / dt))
    if steps < 1:
        raise InvalidScheme(f"horizon {horizon} shorter than one step of {dt}")
    if steps * paths > ERGODIC_BUDGET:
        raise InvalidScheme(f"{steps * paths} steps exceed the budget of {ERGODIC_BUDGET}")
    seeds = [derive_seed(seed, i) for i in range(paths)]
    acc = CompensatedSum(paths)
    taken = 0
    for blk in integrate_batch(model, method, seeds, dt, steps):
        if blk.failures:
            raise next(iter(blk.failures.values()))
        rows = blk.values[:steps - taken]
        if len(rows):
            acc.add_block(np.broadcast_to(np.asarray(h(rows), dtype=float), rows.shape))
        taken += len(rows)
    return float(np.mean(acc.value / steps))


def fit_rate(cells):
    """Slope of log std_theta_hat against log n."""
    ns = np.array([c.n for c in cells], dtype=float)
    stds = np.array([c.std_theta_hat for c in cells], dtype=float)
    if len(ns) < 2:
        raise ValueError("fit_rate needs at least two cells")
    return float(np.polyfit(np.log(ns), np.log(stds), 1)[0])


# ── Reference tables ─────────────────────────────────────────────────────────

def load_reference_tables(directory=TABLES_DIR):
    """case id -> {"model": {...}, "cells": {(n, alpha): (mean, std)}}."""
    tables = {}
    for path in sorted(pathlib.Path(directory).glob("case*.json")):
        data = json.loads(path.read_text(encoding="utf-8"))
        cells = {}
        for row in data["cells"]:
            cells[(int(row["n"]), float(row["alpha"]))] = (float(row["mean"]), float(row["std"]))
        tables[str(data["case"])] = {"title": data.get("title", ""),
                                     "model": data["model"], "cells": cells}
    return tables


def render_table(cells, reference=None, title=""):
    """Rows alpha x (mean, std), columns n; published values in parentheses."""
    cells = list(cells)
    ns = sorted({c.n for c in cells})
    alphas = sorted({c.alpha for c in cells})
    lookup = {(c.n, c.alpha): c for c in cells}
    ref = reference or {}
    width = 22 if ref else 10
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'alpha':>6} {'':>5} " + " ".join(f"{'n=' + str(n):>{width}}" for n in ns))
    for alpha in alphas:
        for label, idx in (("mean", 0), ("std", 1)):
            parts = []
            for n in ns:
                c = lookup.get((n, alpha))
                if c is None:
                    parts.append(f"{'-':>{width}}")
                    continue
                value = c.mean_theta_hat if idx == 0 else c.std_theta_hat
                text = f"{value:.5f}"
                if (n, alpha) in ref:
                    text += f" ({ref[(n, alpha)][idx]:.5f})"
                parts.append(f"{text:>{width}}")
            lines.append(f"{alpha:>6g} {label:>5} " + " ".join(parts))
    return "\n".join(lines) + "\n"
