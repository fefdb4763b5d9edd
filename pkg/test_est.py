#!/usr/bin/env python3
"""Tests for est.py — the discretized drift MLE and its summation."""

import math
import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from errors import DegenerateDenominator
from est import (CSV_HEADER, CompensatedSum, EstimateResult, EstimatorAccumulator, estimate,
                 standardized_error)
from expr import parse
from model import DiffusionModel
from sim import ObservationScheme, ObservedPath, derive_seed, simulate_batch, simulate_path

ONE = (parse("1"), parse("1"))


def _path(values, n, alpha):
    return ObservedPath(ObservationScheme(n, alpha), np.asarray(values, dtype=float),
                        0, "euler", "test")


def test_telescoping_example():
    # a = b = 1: c = d = 1, so theta_hat = (X_N - X_0) / (N / n)
    path = _path(np.arange(9) / 8.0, 4, 0.5)
    res = estimate(path, ONE)
    assert res.theta_hat == 0.5
    assert res.numerator == 1.0
    assert res.denominator_raw == 2.0
    assert abs(res.denominator_Dn - 1.0) < 1e-15
    assert res.N_used == 8
    assert res.metadata["summation"] == "k=1..N"
    # block boundaries do not change the answer here
    assert estimate(path, ONE, block=3).theta_hat == 0.5
    print("  telescoping example: PASS")


def test_constant_path():
    res = estimate(_path(np.full(9, 3.0), 4, 0.5), (parse("-x"), parse("1")))
    assert res.theta_hat == 0.0
    print("  constant path: PASS")


def test_zero_drift_degenerate():
    try:
        estimate(_path(np.linspace(0.0, 1.0, 9), 4, 0.5), (parse("0"), parse("1")))
        assert False, "expected DegenerateDenominator"
    except DegenerateDenominator as exc:
        assert exc.denominator == 0.0
        assert exc.exit_code == 3
    print("  zero drift: PASS")


def test_standardized_error():
    scheme = ObservationScheme(100, 0.5)
    res = EstimateResult(2.1, 0.0, 1.0, 1.0, scheme.N)
    assert abs(standardized_error(res, 2.0, 0.25, scheme) - 0.15811) < 1e-5
    try:
        standardized_error(res, 2.0, 0.0, scheme)
        assert False
    except ValueError:
        pass
    print("  standardized error: PASS")


def test_denominator_scalings():
    model = DiffusionModel.from_strings("1 - x", "2 + sin(x)", 2.0, 1.0)
    for alpha in (0.1, 0.5, 0.9):
        scheme = ObservationScheme(50, alpha)
        res = estimate(simulate_path(model, scheme, "milstein", seed=9), (model.a, model.b))
        assert abs(res.denominator_raw - 50 ** alpha * res.denominator_Dn) \
            <= 1e-12 * res.denominator_raw
        assert res.denominator_Dn > 0.0
    print("  raw = n^alpha * Dn: PASS")


def test_scale_equivariance():
    model = DiffusionModel.from_strings("-atan(x)", "1", 2.0, 1.0)
    path = simulate_path(model, ObservationScheme(100, 0.5), "euler", seed=derive_seed(42, 0))
    base = estimate(path, (parse("-atan(x)"), parse("1"))).theta_hat
    # b -> k b leaves c/d unchanged
    scaled_b = estimate(path, (parse("-atan(x)"), parse("3"))).theta_hat
    assert abs(scaled_b - base) <= 1e-12 * abs(base)
    # a -> k a divides theta_hat by k
    scaled_a = estimate(path, (parse("-2*atan(x)"), parse("1"))).theta_hat
    assert abs(scaled_a - base / 2.0) <= 1e-12 * abs(base)
    # constant c and d: stretching the increments by lam stretches theta_hat by lam
    for lam in (0.25, 3.0, -2.0):
        res = estimate(_path(lam * np.arange(9) / 8.0, 4, 0.5), ONE)
        assert res.theta_hat == 0.5 * lam
        assert res.denominator_raw == 2.0
    print("  scale equivariance: PASS")


def test_streamed_matches_stored():
    model = DiffusionModel.from_strings("-x / (1 + x^2)", "1", 2.0, 1.0)
    scheme = ObservationScheme(100, 0.5)
    seeds = [derive_seed(42, i) for i in range(4)]
    acc = EstimatorAccumulator(model.a, model.b, scheme, len(seeds))
    for blk in simulate_batch(model, scheme, "milstein", seeds, block=50):
        acc.feed(blk.values)
    assert acc.count == scheme.N
    for j, seed in enumerate(seeds):
        path = simulate_path(model, scheme, "milstein", seed=seed, block=50)
        stored = estimate(path, (model.a, model.b))
        streamed = acc.result(j)
        assert stored.theta_hat == streamed.theta_hat, (j, stored, streamed)
        assert stored.N_used == streamed.N_used
        assert stored.metadata["seed"] == seed
    print("  streamed matches stored: PASS")


def test_compensated_sum():
    s = CompensatedSum(1)
    for v in (1e16, 1.0, -1e16):
        s.add([v])
    assert s.value[0] == 1.0
    rng = np.random.default_rng(5)
    values = rng.standard_normal(10_000) * 10.0 ** rng.integers(-8, 8, 10_000)
    s = CompensatedSum(2)
    for chunk in np.array_split(values, 37):
        s.add_block(np.column_stack([chunk, -chunk]))
    exact = math.fsum(values)
    assert abs(s.value[0] - exact) <= 1e-12 * max(1.0, abs(exact)) * 1e3
    assert s.value[0] == -s.value[1]
    print("  compensated sum: PASS")


def test_csv_row():
    scheme = ObservationScheme(4, 0.5)
    res = estimate(_path(np.arange(9) / 8.0, 4, 0.5), ONE)
    row = res.csv_row(7, scheme, "euler")
    assert len(row) == len(CSV_HEADER)
    assert row[:4] == [7, 4, 0.5, "euler"]
    assert float(row[4]) == 0.5
    assert row[6] == 8
    print("  CSV row: PASS")


def test_ou_estimates_near_theta():
    # predicted std at n=1000, alpha=0.9 is about 0.089, so 2 +- 0.25 is loose
    model = DiffusionModel.from_strings("-x", "1", 2.0, 0.0)
    scheme = ObservationScheme(1000, 0.9)
    seeds = [derive_seed(2023, r) for r in range(100)]
    acc = EstimatorAccumulator(model.a, model.b, scheme, len(seeds))
    for blk in simulate_batch(model, scheme, "milstein", seeds):
        acc.feed(blk.values)
    assert acc.count == scheme.N
    inside = sum(abs(acc.result(r).theta_hat - 2.0) <= 0.25 for r in range(len(seeds)))
    assert inside >= 95, inside
    print(f"  OU estimates near theta ({inside}/100): PASS")


if __name__ == "__main__":
    print("est tests")
    test_telescoping_example()
    test_constant_path()
    test_zero_drift_degenerate()
    test_standardized_error()
    test_denominator_scalings()
    test_scale_equivariance()
    test_streamed_matches_stored()
    test_compensated_sum()
    test_csv_row()
    test_ou_estimates_near_theta()
    print("\nAll est tests passed!")
