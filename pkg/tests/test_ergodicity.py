import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbire.certify import ControlFunctions
from cbire.coupling import CouplingConfig
from cbire.errors import DomainError
from cbire.ergodicity import (contraction_rate, fit_rate, stationary_estimate, wv_distance,
                              wv_estimate)
from cbire.simulate import SimConfig
from conftest import make_model

CF = ControlFunctions(lambda0=0.5, x0=1.0, theta=10.0, l0=5.0, theta_v=0.5, eps=1.0)


def test_wv_identical_samples(rng):
    a = rng.exponential(size=1000)
    assert wv_distance(a, a.copy(), 0.5) == 0.0


def test_wv_two_atoms():
    assert wv_distance(np.zeros(50), np.ones(50), 0.5) == pytest.approx(1 + math.sqrt(2))


def test_wv_empty_rejected():
    with pytest.raises(DomainError):
        wv_distance([], [1.0], 0.5)


def test_wv_explicit_edges_must_cover():
    with pytest.raises(DomainError):
        wv_distance([0.5], [3.0], 0.5, bins=[0.0, 1.0, 2.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_wv_triangle_inequality(seed):
    r = np.random.default_rng(seed)
    a, b, c = r.exponential(1.0, 300), r.exponential(1.5, 300), r.gamma(2.0, size=300)
    edges = np.concatenate([[0.0], np.linspace(0.1, 30, 60), [1e6]])
    ab = wv_distance(a, b, 0.5, edges)
    bc = wv_distance(b, c, 0.5, edges)
    ac = wv_distance(a, c, 0.5, edges)
    assert ac <= ab + bc + 1e-12


def test_wv_bounded_by_coupling_cost(rng):
    x = rng.exponential(2.0, 5000)
    y = np.where(rng.random(5000) < 0.4, x, rng.exponential(1.0, 5000))
    est = wv_estimate(x, y, 0.5)
    dv = np.mean(np.where(x != y, (1 + x) ** 0.5 + (1 + y) ** 0.5, 0.0))
    assert est.value <= dv + est.bin_error + 1e-12


def test_fit_rate_exact_exponential():
    t = np.linspace(0, 4, 21)
    mean = 3.0 * np.exp(-0.7 * t)
    rate, (lo, hi), window, degenerate = fit_rate(t, mean, mean * 0.01)
    assert not degenerate
    assert rate == pytest.approx(0.7, rel=1e-10)
    assert lo <= 0.7 <= hi
    assert not window[0]


def test_fit_rate_degenerate():
    t = np.linspace(0, 1, 5)
    rate, _, _, degenerate = fit_rate(t, np.zeros(5), np.zeros(5))
    assert degenerate and math.isnan(rate)


def test_contraction_diagonal_start():
    m = make_model(sigma=1.0, b=1.0)
    rep = contraction_rate(m, CF, 2.0, 2.0, 200, CouplingConfig(dt=0.02, t_end=1.0, seed=1))
    assert np.all(rep.mean_F == 0.0)
    assert rep.degenerate and math.isnan(rep.fitted_rate)
    assert np.all(rep.p_coupled == 1.0)


def test_contraction_bound_dominates_wv():
    m = make_model(sigma=1.0, b=1.0)
    rep = contraction_rate(m, CF, 3.0, 0.5, 2000, CouplingConfig(dt=0.02, t_end=2.0, seed=3),
                           record_times=np.linspace(0, 2, 11))
    assert np.all(rep.wv <= rep.coupling_bound + rep.wv_error + 1e-12)
    assert np.all(np.diff(rep.p_coupled) >= 0)
    assert rep.fitted_rate > 0


def test_contraction_needs_certificate_type():
    m = make_model(sigma=1.0)
    with pytest.raises(TypeError):
        contraction_rate(m, object(), 1.0, 0.0, 10, CouplingConfig())


def test_csv_columns():
    m = make_model(sigma=1.0, b=1.0)
    rep = contraction_rate(m, CF, 1.0, 0.0, 50, CouplingConfig(dt=0.05, t_end=0.5, seed=4))
    lines = rep.to_csv().splitlines()
    assert lines[0] == "t,mean_F,se,coupling_bound,wv"
    assert len(lines) == len(rep.times) + 1


def test_stationary_zero_absorbing():
    m = make_model(alpha=0.0, sigma=1.0, b=0.5)
    est = stationary_estimate(m, SimConfig(dt=0.02, t_end=1.0, seed=2), 1.0, 500, starts=(0.0,))
    assert np.all(est.samples == 0.0)
    assert est.exploratory


def test_stationary_zero_horizon_returns_start():
    m = make_model(sigma=1.0)
    est = stationary_estimate(m, SimConfig(t_end=0.0), 0.0, 100, starts=(0.0, 10.0))
    assert np.all(est.by_start[0.0] == 0.0)
    assert np.all(est.by_start[10.0] == 10.0)
    assert est.ks_stat == 1.0


def test_stationary_negative_burn_in():
    with pytest.raises(DomainError):
        stationary_estimate(make_model(sigma=1.0), SimConfig(), -1.0, 10)


def test_stationary_mixes_fast_model():
    m = make_model(sigma=1.0, b=2.0)
    est = stationary_estimate(m, SimConfig(dt=0.01, t_end=1.0, seed=6), 4.0, 4000,
                              certified=True)
    s = est.summary()
    assert s["mixed"] and not s["exploratory"]
    # affine stationary mean alpha / b
    assert s["mean"] == pytest.approx(0.5, abs=0.05)
