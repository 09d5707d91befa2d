import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbire.certify import (ControlFunction2D, ControlFunctions, DriftCertificate, ThetaParts,
                           build_regions, certify, check_immigration, check_negative_jump_tail,
                           check_nontriviality, eval_F, find_lambda0, find_lambda3,
                           lemma_bound, theta_branches, verification_grid)
from cbire.errors import ConditionError
from cbire.generator import LyapunovReport, TestFunction2D, apply_L_coupled, lyapunov_check
from conftest import make_model

CF = ControlFunctions(lambda0=0.7, x0=0.8, theta=5.0, l0=3.0, theta_v=0.5, eps=2.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 50.0))
def test_psi_doubling_deficit(u):
    assert CF.psi(2 * u) - 2 * CF.psi(u) <= -1 + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 50.0))
def test_psi_shape(u):
    assert 1.0 <= CF.psi(u) < 2.0 or u > 40
    assert CF.dpsi(u) >= 0 and CF.d2psi(u) <= 0


def test_phi_shape():
    xs = np.linspace(0, 2, 201)
    p = CF.phi(xs)
    assert CF.phi(0.0) == pytest.approx(CF.theta + 1)
    assert np.all(np.diff(p) <= 0)
    assert np.all(p[xs >= CF.x0] == CF.theta)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.5), st.floats(0.0, 2.0))
def test_phi_remainder_matches_direct(m, z):
    direct = CF.phi(m + z) - CF.phi(m) - CF.dphi(m) * z
    assert CF.phi_rem(m, z) == pytest.approx(direct, abs=1e-12)
    assert CF.phi_rem(m, z) >= 0


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 6.0), st.floats(0.0, 0.99), st.floats(1e-4, 5.0))
def test_leader_remainder_matches_generic(x, ratio, z):
    f = ControlFunction2D(CF)
    y = x * ratio
    exact = f.rem_x(x, y, np.array([z]))[0]
    generic = TestFunction2D.rem_x(f, x, y, np.array([z]))[0]
    assert exact == pytest.approx(generic, abs=1e-9 * (1 + abs(generic)))
    assert f.rem_y(y, x, np.array([z]))[0] == pytest.approx(exact, abs=1e-12)


def test_F_vanishes_on_diagonal():
    assert CF.F(1.3, 1.3) == 0.0
    assert CF.F(0.0, 0.0) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 100.0), st.floats(0.0, 100.0))
def test_F_dominates_distance(x, y):
    if x == y:
        return
    assert CF.F(x, y) >= CF.V(x) + CF.V(y)
    assert CF.F(x, y) == pytest.approx(CF.F(y, x))


def test_immigration_required():
    with pytest.raises(ConditionError) as info:
        check_immigration(make_model(alpha=0.0, sigma=1.0))
    assert info.value.condition == "immigration"


def test_nontriviality_with_noise():
    assert check_nontriviality(make_model(sigma=1.0)) == (1.0, 0.0)


def test_nontriviality_fails_for_finite_first_moment():
    mu = {"family": "power_law_cutoff", "c": 1.0, "a": 0.5, "beta": 1.0}
    with pytest.raises(ConditionError) as info:
        check_nontriviality(make_model(mu=mu))
    assert info.value.condition == "nontriviality"


def test_nontriviality_infinite_first_moment():
    mu = {"family": "sum", "terms": [
        {"family": "power_law_cutoff", "c": 1.0, "a": 1.0, "beta": 0.0, "hi": 1.0},
        {"family": "exponential", "c": 1.0, "beta": 1.0, "lo": 1.0}]}
    c0, delta = check_nontriviality(make_model(mu=mu), c0=0.5)
    assert c0 == 0.5 and delta > 0


def test_lambda3_immediate():
    assert find_lambda3(make_model(sigma=1.0)) == pytest.approx(1e-6)


def test_lambda3_quadratic_root():
    lam3 = find_lambda3(make_model(sigma=1.0, beta0=2.0))
    assert 4.0 < lam3 <= 4.0 * (1 + 1e-8)


def test_lambda0_without_lipschitz_term():
    m = make_model(sigma=1.0, beta0=2.0)
    lam3 = find_lambda3(m)
    assert find_lambda0(m, 2.0, 0.0, 1.0, lam3) == pytest.approx(lam3, rel=1e-8)


def test_lambda0_lipschitz_example():
    m = make_model(sigma=1.0, r={"form": "affine", "a0": 0.0, "a1": 1.0, "lipschitz": 1.0})
    lam0 = find_lambda0(m, 2.0, 1.0, 1.0, find_lambda3(m))
    # Phi~(l)/l = l/2 must reach 4 k0 l0 = 8
    assert lam0 == pytest.approx(16.0, rel=1e-7)


def test_regions_without_negative_jumps():
    m = make_model(sigma=1.0, g={"form": "polynomial", "coeffs": [0, 0, 1]})
    lyap = lyapunov_check(m, 0.5)
    reg = build_regions(m, lyap, None, 1.0)
    assert reg.M == pytest.approx(12.0**2 - 1, rel=1e-12)
    assert reg.K0 == pytest.approx(1.5)
    assert all(c["holds"] for c in reg.checks)


def test_regions_empty_level_set():
    m = make_model(sigma=1.0)
    lyap = LyapunovReport(0.5, 10.0, 1.0, np.zeros(1), np.ones(1), np.zeros(1), 0.0, True)
    reg = build_regions(m, lyap, 1.0, 1.0)
    assert reg.S0_bound == 0.0
    assert reg.l0 == reg.M


def test_theta_branches_noise_only():
    lam0, l0, x0, K, R, r = 2.0, 3.0, 1.0, 1.5, 0.7, 0.25
    p = ThetaParts(H=0.0, K=K, R=R, x0=x0, l0=l0, lambda0=lam0, k0=0.0, sigma=1.0, delta=0.0,
                   r_small=r, phi_tilde=0.5 * lam0**2, energy=0.0)
    br = theta_branches(p)
    d = lam0**2 * math.exp(-lam0 * l0)
    assert br["floor"] == 4.0
    assert br["near_large"] == pytest.approx(4 * K / (x0 * d), rel=1e-14)
    assert br["near_small"] == pytest.approx(4 * (6 * R + K) / (r * x0 * d) + 2, rel=1e-14)


def test_theta_branches_overlap_only():
    p = ThetaParts(H=0.1, K=1.0, R=1.0, x0=0.5, l0=2.0, lambda0=1.0, k0=0.1, sigma=0.0,
                   delta=0.3, r_small=0.2, phi_tilde=1.0, energy=0.0)
    assert theta_branches(p)["near_large"] == pytest.approx(4 * 1.2 / (0.5 * 0.3))


def test_negative_tail_flagged():
    # catastrophes growing like x overwhelm V(x)^{1/2}
    m = make_model(sigma=1.0, r={"form": "affine", "a0": 0.0, "a1": 1.0, "lipschitz": 1.0},
                   q={"atoms": [[0.0, 1.0]]})
    with pytest.raises(ConditionError) as info:
        check_negative_jump_tail(m, 0.5)
    assert info.value.condition == "negative_jump_tail"


def test_verification_grid_shape():
    pts = verification_grid(10.0, 1.0)
    assert len(pts) == 2 * (64 * 64 + 3 * 32)
    assert np.all(pts[:, 0] != pts[:, 1])
    assert pts.max() == pytest.approx(40.0 + 0.1)


def test_anti_example_refused():
    with pytest.raises(ConditionError) as info:
        certify(make_model(sigma=1.0, beta0=1.0), 0.5)
    assert info.value.condition == "lyapunov"


# the shipped example ----------------------------------------------------------------------


def test_theorem_certificate_verified(theorem_cert):
    c = theorem_cert
    assert c.verified and c.lam > 0
    assert c.grid_margin >= -c.slack_at_min
    assert all(ch["holds"] for ch in c.checks), [ch for ch in c.checks if not ch["holds"]]
    assert c.theta >= max(c.theta_branches.values())
    assert c.eps == pytest.approx(3 * c.lambda2 / c.K0)


def test_theorem_certificate_F_bounds(theorem_cert):
    c = theorem_cert
    base = c.controls.V(c.grid[:, 0]) + c.controls.V(c.grid[:, 1]) + 1
    assert np.all(c.Fvals <= c.C4 * base * (1 + 1e-12))
    assert np.all(base <= c.C4 * c.Fvals * (1 + 1e-12))
    assert np.all(-c.LF >= c.C3 * base * (1 - 1e-12))


def test_eval_F_hand_composed(theorem_cert):
    c = theorem_cert
    cf = c.controls
    gap = max(0.0, 1 - 1.0 / c.x0) ** 3
    want = 2**c.theta_v + 1 + c.eps * (c.theta + gap) * (2 - math.exp(-c.lambda0 * min(1, c.l0)))
    assert eval_F(c, 1.0, 0.0) == pytest.approx(want, rel=1e-14)
    assert eval_F(c, 2.0, 2.0) == 0.0
    assert cf.F(0.0, 1.0) == pytest.approx(want, rel=1e-14)


def test_lemma_bound_dominates_generator(theorem_model, theorem_cert):
    c = theorem_cert
    f = ControlFunction2D(c.controls)
    for x, u in ((1.5, 0.2), (3.0, 1.0), (8.0, 5.0), (30.0, c.l0)):
        exact = apply_L_coupled(theorem_model, f, x, x - u)
        assert exact <= lemma_bound(theorem_model, c, x, x - u) + 1e-8 * (1 + abs(exact))


def test_certificate_roundtrip(theorem_cert):
    d = theorem_cert.to_dict()
    back = DriftCertificate.from_dict(d)
    assert back.to_dict() | {"n_grid": d["n_grid"]} == d


def test_grid_workers_agree(theorem_model):
    a = certify(theorem_model, 0.9, n_grid=12, rebalance=True)
    b = certify(theorem_model, 0.9, n_grid=12, rebalance=True, workers=4)
    assert np.array_equal(a.LF, b.LF)
    assert a.lam == b.lam


def test_stronger_competition_keeps_rate(theorem_model):
    from cbire.model import model_from_config
    cfg = dict(theorem_model.to_config())
    cfg["g"] = {"form": "polynomial", "coeffs": [0, 0, 2]}
    strong = model_from_config(cfg)
    base = certify(theorem_model, 0.9, n_grid=16)
    more = certify(strong, 0.9, n_grid=16)
    assert base.verified and more.verified
    assert more.lam >= base.lam * (1 - 1e-9)
