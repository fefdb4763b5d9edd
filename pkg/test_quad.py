#!/usr/bin/env python3
"""Tests for quad.py — Gauss–Kronrod panels, adaptive and real-line integration."""

import math
import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from errors import BudgetExceeded, NonFiniteValue, SuspectedDivergent
from quad import (REAL_LINE_R0, QuadResult, gauss_kronrod, integrate,
                  integrate_real_line)

# (integrand, a, b, exact)
CLOSED_FORM = [
    (lambda x: x ** 2, 0.0, 1.0, 1.0 / 3.0),
    (np.sin, 0.0, math.pi, 2.0),
    (lambda x: np.exp(-x ** 2), -5.0, 5.0, math.sqrt(math.pi) * math.erf(5.0)),
    (lambda x: np.exp(x), -1.0, 2.0, math.e ** 2 - math.exp(-1.0)),
    (lambda x: 1.0 / (1.0 + x ** 2), -3.0, 7.0, math.atan(7.0) + math.atan(3.0)),
]


def test_kronrod_panel_exact_for_polynomials():
    # K15 integrates polynomials up to degree 22 exactly
    value, err, resabs = gauss_kronrod(lambda x: x ** 10 - 3 * x ** 3, -1.0, 2.0)
    exact = (2.0 ** 11 + 1.0) / 11.0 - 3.0 * (16.0 - 1.0) / 4.0
    assert abs(value - exact) < 1e-12 * abs(exact)
    assert err >= 0.0 and resabs > 0.0
    print("  Kronrod panel: PASS")


def test_integrate_examples():
    r = integrate(lambda x: x ** 2, 0.0, 1.0)
    assert r.converged and abs(r.value - 1.0 / 3.0) < 1e-14
    r = integrate(np.sin, 0.0, math.pi)
    assert r.converged and abs(r.value - 2.0) < 1e-13
    r = integrate(lambda x: np.exp(-x ** 2), -5.0, 5.0)
    assert abs(r.value - 1.7724538509055) < 1e-9
    assert r.evaluations % 15 == 0
    print("  integrate examples: PASS")


def test_error_estimate_honesty():
    for f, a, b, exact in CLOSED_FORM:
        r = integrate(f, a, b)
        assert r.converged
        assert abs(r.value - exact) <= 10.0 * r.abs_error_estimate, (a, b, r)
        assert r.abs_error_estimate <= max(1e-12, 1e-10 * abs(r.value))
    print("  error-estimate honesty: PASS")


def test_refinement_monotonicity():
    for f, a, b, exact in CLOSED_FORM:
        previous = math.inf
        for rel_tol in (1e-4, 5e-5, 2.5e-5, 1.25e-5, 1e-8, 5e-9):
            err = abs(integrate(f, a, b, rel_tol=rel_tol, abs_tol=0.0).value - exact)
            assert err <= previous + 4e-16 * abs(exact), (a, b, rel_tol, err, previous)
            previous = err
    print("  refinement monotonicity: PASS")


def test_endpoint_singularity():
    r = integrate(lambda x: 1.0 / np.sqrt(x), 0.0, 1.0)
    assert abs(r.value - 2.0) < 1e-7, r
    print("  endpoint singularity: PASS")


def test_scalar_only_integrand():
    r = integrate(lambda x: math.exp(-x * x), -5.0, 5.0)
    assert abs(r.value - 1.7724538509055) < 1e-9
    print("  scalar integrand: PASS")


def test_non_finite_value():
    with np.errstate(divide="ignore"):
        try:
            integrate(lambda x: 1.0 / x, -1.0, 1.0)
            assert False, "node at 0 must raise NonFiniteValue"
        except NonFiniteValue as exc:
            assert exc.x == 0.0
    print("  non-finite value: PASS")


def test_budget():
    r = integrate(lambda x: np.abs(x - 0.3), 0.0, 1.0, rel_tol=1e-15, abs_tol=0.0, budget=45)
    assert not r.converged
    assert r.evaluations == 45
    try:
        integrate(lambda x: np.abs(x - 0.3), 0.0, 1.0, rel_tol=1e-15, abs_tol=0.0,
                  budget=45, strict=True)
        assert False
    except BudgetExceeded as exc:
        assert isinstance(exc.result, QuadResult)
        assert not exc.result.converged
    print("  budget: PASS")


def test_bad_limits():
    for a, b in [(1.0, 0.0), (0.0, math.inf)]:
        try:
            integrate(np.sin, a, b)
            assert False
        except ValueError:
            pass
    print("  bad limits: PASS")


def test_real_line_gaussians():
    r = integrate_real_line(lambda x: np.exp(-x ** 2))
    assert abs(r.value - math.sqrt(math.pi)) < 1e-8
    assert r.converged and not r.suspected_divergent
    assert r.radius >= 2 * REAL_LINE_R0
    r = integrate_real_line(lambda x: np.exp(-2.0 * x ** 2))
    assert abs(r.value - math.sqrt(math.pi / 2.0)) < 1e-8
    assert abs(r.value - 1.2533141373) < 1e-9
    print("  real-line Gaussians: PASS")


def test_real_line_heavy_but_integrable():
    # tails ~ x^-4; converges once R is a few thousand
    r = integrate_real_line(lambda x: 1.0 / (1.0 + x ** 2) ** 2)
    assert abs(r.value - math.pi / 2.0) < 1e-8
    print("  real-line x^-4 tails: PASS")


def test_real_line_divergent():
    f = lambda x: 1.0 / (1.0 + x ** 2) ** 0.3
    try:
        integrate_real_line(f)
        assert False, "expected SuspectedDivergent"
    except SuspectedDivergent as exc:
        assert exc.result.suspected_divergent
        assert not exc.result.converged
        assert exc.radius > REAL_LINE_R0
    r = integrate_real_line(f, raise_on_divergence=False)
    assert r.suspected_divergent and not r.converged
    print("  real-line divergence: PASS")


def test_real_line_overflowing_tail():
    # exp(x^2) overflows in the tails: reported as divergence, not a crash
    with np.errstate(over="ignore"):
        r = integrate_real_line(lambda x: np.exp(x ** 2), raise_on_divergence=False)
    assert r.suspected_divergent
    print("  overflowing tail: PASS")


if __name__ == "__main__":
    print("quad tests")
    test_kronrod_panel_exact_for_polynomials()
    test_integrate_examples()
    test_error_estimate_honesty()
    test_refinement_monotonicity()
    test_endpoint_singularity()
    test_scalar_only_integrand()
    test_non_finite_value()
    test_budget()
    test_bad_limits()
    test_real_line_gaussians()
    test_real_line_heavy_but_integrable()
    test_real_line_divergent()
    test_real_line_overflowing_tail()
    print("\nAll quad tests passed!")
