import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbire.errors import AdmissibilityError, DomainError
from cbire.measures import (Interval, measure_from_config, overlap_mass, rho, rho_safe,
                            sample_restricted, truncated_mass)
from cbire.quadrature import integrate_interval

EXP = measure_from_config({"family": "exponential", "c": 1.0, "beta": 1.0}, "branching")
POWER = measure_from_config({"family": "power_law_cutoff", "c": 0.5, "a": 1.2, "beta": 1.0},
                            "branching")


def test_quadrature_polynomial_exact():
    val, _ = integrate_interval(lambda z: z**3, 0.0, 2.0)
    assert val == pytest.approx(4.0, rel=1e-14)


def test_quadrature_log_singular():
    val, _ = integrate_interval(lambda z: z**-0.5, 1e-12, 1.0, log=True)
    assert val == pytest.approx(2.0 * (1 - 1e-6), rel=1e-10)


def test_truncated_mass_exponential_tail():
    assert truncated_mass(EXP, Interval(1.0, math.inf)) == pytest.approx(math.exp(-1), abs=1e-12)


def test_truncated_mass_empty_region():
    assert truncated_mass(EXP, Interval(2.0, 1.0)) == 0.0


def test_truncated_mass_atom():
    half = measure_from_config({"family": "atoms", "atoms": [[0.5, 1.0]]}, "catastrophe")
    assert truncated_mass(half, Interval(0.0, 1.0, True, True)) == pytest.approx(1.0)


def test_truncated_mass_infinite_near_zero():
    with pytest.raises(AdmissibilityError):
        truncated_mass(POWER, Interval(0.0, 1.0))


def test_power_law_tail_mass_finite():
    assert 0 < truncated_mass(POWER, Interval(0.1, math.inf)) < math.inf


def test_restricted_sample_mean():
    rng = np.random.default_rng(0)
    eps = 0.3
    vals, _ = EXP.sampler(Interval(eps, math.inf)).sample(rng, 10**6)
    # memoryless: the restricted law is eps + Exp(1)
    se = vals.std() / math.sqrt(vals.size)
    assert abs(vals.mean() - (eps + 1.0)) < 3 * se


def test_two_atom_frequencies():
    q = measure_from_config({"family": "atoms", "atoms": [[0.3, 0.5], [0.7, 0.5]]}, "catastrophe")
    vals, is_atom = q.sampler(Interval(0.0, 1.0, True, True)).sample(np.random.default_rng(1), 10**6)
    assert is_atom.all()
    assert abs(np.mean(vals == 0.3) - 0.5) < 0.002


def test_power_law_sampler_ks():
    n = 10**5
    region = Interval(0.05, math.inf)
    vals, _ = POWER.sampler(region).sample(np.random.default_rng(2), n)
    total = truncated_mass(POWER, region)
    grid = np.sort(vals)

    def cdf(z):
        return truncated_mass(POWER, Interval(0.05, z)) / total
    sub = grid[:: n // 200]
    emp = np.searchsorted(grid, sub, side="right") / n
    D = max(abs(emp[i] - cdf(z)) for i, z in enumerate(sub))
    assert D < 1.63 / math.sqrt(n)


def test_sample_restricted_in_region():
    z = sample_restricted(EXP, Interval(2.0, 3.0), np.random.default_rng(3))
    assert 2.0 < z <= 3.0


def test_rho_values():
    assert rho(EXP, 0.0, 0.7) == 1.0
    assert rho(EXP, 1.0, 0.5) == 0.0
    assert rho(EXP, -1.0, 0.5) == pytest.approx(math.exp(-1), abs=1e-15)


def test_rho_undefined_outside_support():
    with pytest.raises(DomainError):
        rho(EXP, 1.0, -0.5)
    assert rho_safe(EXP, 1.0, np.array([-0.5]))[0] == 0.0


def test_overlap_exponential_closed_form():
    for x in (0.1, 0.5, 1.0, 3.0):
        assert overlap_mass(EXP, x) == pytest.approx(math.exp(-x), abs=1e-8)


@pytest.mark.parametrize("x", [0.1, 0.5, 2.0])
def test_overlap_symmetric(x):
    for mu in (EXP, POWER):
        assert overlap_mass(mu, x) == pytest.approx(overlap_mass(mu, -x), rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 5.0), st.floats(0.0, 5.0))
def test_overlap_nonincreasing(a, d):
    assert overlap_mass(POWER, a + d) <= overlap_mass(POWER, a) * (1 + 1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 10))
def test_rho_in_unit_interval(x, z):
    r = rho_safe(POWER, x, np.array([z]))[0]
    assert 0.0 <= r <= 1.0


def test_nonintegrable_branching_rejected():
    with pytest.raises(AdmissibilityError):
        measure_from_config({"family": "power_law_cutoff", "c": 1.0, "a": 2.5, "beta": 1.0},
                            "branching")


def test_catastrophe_mass_must_be_one():
    with pytest.raises(AdmissibilityError):
        measure_from_config({"family": "atoms", "atoms": [[0.5, 0.7]]}, "catastrophe")


def test_environment_measure_two_sided():
    nu = measure_from_config({"family": "two_sided",
                              "positive": {"family": "exponential", "c": 0.2, "beta": 3.0},
                              "negative": {"family": "exponential", "c": 0.2, "beta": 3.0}},
                             "environment")
    total = nu.integrate(lambda z: np.ones(np.shape(z)))
    assert total == pytest.approx(2 * 0.2 / 3.0, rel=1e-10)
