import math

import numpy as np
import pytest

from cbire.errors import DomainError, InstabilityError
from cbire.simulate import (SimConfig, block_rng, simulate_ensemble, simulate_path,
                            simulate_states, step)
from conftest import EXAMPLES, make_model


def test_pure_drift_step():
    m = make_model(b=1.0)
    x = step(m, 0.0, 0.01, np.random.default_rng(0), SimConfig(dt=0.01))
    assert x == pytest.approx(0.01, abs=1e-15)


def test_total_catastrophe_kills_state():
    # rate so large that a catastrophe is certain within the step
    m = make_model(alpha=0.0, r={"form": "constant", "value": 1e4, "inf": 1e4},
                   q={"atoms": [[0.0, 1.0]]})
    x = step(m, 5.0, 0.01, np.random.default_rng(0), SimConfig(dt=0.01))
    assert x == 0.0


def test_step_rejects_oversized_dt(theorem_model):
    with pytest.raises(DomainError):
        step(theorem_model, 1.0, 0.1, np.random.default_rng(0), SimConfig(dt=0.01))


def test_ode_path_first_order():
    m = make_model(alpha=1.0, b=1.0)
    errs = []
    for dt in (0.02, 0.01):
        p = simulate_path(m, 3.0, SimConfig(dt=dt, t_end=2.0))
        exact = 1.0 + 2.0 * np.exp(-p.times)
        errs.append(np.max(np.abs(p.states - exact)))
    assert errs[0] < 0.05
    assert errs[1] < 0.6 * errs[0]


def test_path_csv_reproducible(theorem_model):
    cfg = SimConfig(dt=0.01, t_end=1.0, seed=42)
    a = simulate_path(theorem_model, 1.0, cfg).to_csv()
    b = simulate_path(theorem_model, 1.0, cfg).to_csv()
    assert a == b
    assert a != simulate_path(theorem_model, 1.0, cfg.replace(seed=43)).to_csv()


def test_zero_is_absorbing_without_immigration():
    m = make_model(alpha=0.0, sigma=1.0, beta1=0.5, beta0=0.3,
                   mu={"family": "exponential", "c": 1.0, "beta": 1.0})
    p = simulate_path(m, 0.0, SimConfig(dt=0.01, t_end=2.0, seed=1))
    assert np.all(p.states == 0.0)


def test_affine_mean_ode():
    m = make_model(alpha=1.0, b=0.5, sigma=1.0, beta0=0.2, beta1=0.3,
                   mu={"family": "exponential", "c": 1.0, "beta": 2.0})
    x0, t_end, n = 2.0, 1.0, 10**5
    times, states, bad = simulate_states(m, x0, n, SimConfig(dt=0.01, t_end=t_end, seed=5),
                                         [0.5, 1.0])
    assert not bad.any()
    k = m.beta0 - m.b
    for t, row in zip(times, states):
        exact = x0 * math.exp(k * t) + m.alpha / k * math.expm1(k * t)
        se = row.std() / math.sqrt(n)
        # Euler bias is O(dt) on top of the sampling error
        assert abs(row.mean() - exact) < 3 * se + 0.01 * exact


@pytest.mark.parametrize("name", EXAMPLES)
def test_workers_do_not_change_results(example_models, name):
    m = example_models[name]
    cfg = SimConfig(dt=0.02, t_end=0.4, seed=9, block_size=256)
    a = simulate_ensemble(m, 1.0, 1000, cfg).to_csv()
    b = simulate_ensemble(m, 1.0, 1000, cfg.replace(workers=8)).to_csv()
    assert a == b


def test_single_path_ensemble_matches_path(theorem_model):
    cfg = SimConfig(dt=0.01, t_end=0.5, seed=3)
    _, states, _ = simulate_states(theorem_model, 2.0, 1, cfg)
    p = simulate_path(theorem_model, 2.0, cfg)
    assert np.array_equal(states[:, 0], p.states)


def test_block_streams_independent():
    a = block_rng(1, 0).random(4)
    b = block_rng(1, 1).random(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, block_rng(1, 0).random(4))


def test_overflow_guard_raises_with_prefix():
    m = make_model(b=-50.0)
    with pytest.raises(InstabilityError) as info:
        simulate_path(m, 1.0, SimConfig(dt=0.1, t_end=5.0, overflow_guard=1e6))
    assert info.value.prefix is not None
    assert len(info.value.prefix.states) > 1


def test_ensemble_excludes_unstable_paths():
    m = make_model(b=-50.0)
    summ = simulate_ensemble(m, 1.0, 10, SimConfig(dt=0.1, t_end=5.0, overflow_guard=1e6))
    assert summ.n_excluded == 10


def test_states_nonnegative(example_models):
    for m in example_models.values():
        _, states, bad = simulate_states(m, 0.5, 2000, SimConfig(dt=0.05, t_end=1.0, seed=2))
        assert np.all(states[:, ~bad] >= 0)


def test_t_end_zero_returns_initial_state(theorem_model):
    _, states, _ = simulate_states(theorem_model, 3.0, 5, SimConfig(t_end=0.0))
    assert np.all(states == 3.0)
