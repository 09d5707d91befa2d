"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Tolerances are pinned here and must not be loosened.
"""

import math
import time

import numpy as np
import yaml
from scipy import stats

from cbire import cli
from cbire.config import load_config
from cbire.coupling import CouplingConfig, check_stickiness, simulate_pairs
from cbire.ergodicity import contraction_rate
from cbire.generator import (apply_L, apply_L_coupled, from_sum, generator_mc_consistency,
                             linear, lyapunov_check, lyapunov_ratio, power_shift, random_bounded)
from cbire.measures import overlap_mass
from cbire.simulate import SimConfig, simulate_states
from conftest import EXAMPLES, EXP_MU, make_model, shipped

# pinned tolerances
MARGINAL_FACTOR = 10.0
MC_SE_FACTOR = 4.0
MC_C = 10.0
KS_LEVEL = 0.01
CONTRACTION_SE = 3.0
RATE_FRACTION = 0.5
LYAP_RTOL = 1e-6
PHI_ATOL = 1e-8
OVERLAP_ATOL = 1e-8
H_ATOL = 1e-12


def test_c1_marginal_property(example_models, record_criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for name in EXAMPLES:
        m = example_models[name]
        rng = np.random.default_rng(2024)
        tol = max(m.quad.abs_tol, m.quad.rel_tol)
        for _ in range(20):
            f1, f2 = random_bounded(rng), random_bounded(rng)
            h = from_sum(f1, f2)
            for _ in range(50):
                x, y = rng.uniform(0.0, 10.0, 2)
                a, b = apply_L(m, f1, x), apply_L(m, f2, y)
                err = abs(apply_L_coupled(m, h, x, y) - a - b)
                worst = max(worst, err / (MARGINAL_FACTOR * tol * (1 + abs(a) + abs(b))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1.0 and elapsed < 60
    record_criterion(1, ok, f"worst error / allowance = {worst:.3g}, {elapsed:.1f}s")
    assert ok


def test_c2_generator_simulator_consistency(theorem_model, record_criterion):
    t0 = time.perf_counter()
    rows = []
    for f, label in ((linear(), "x"), (power_shift(0.5), "sqrt(1+x)")):
        for x in (0.5, 1.0, 5.0):
            rep = generator_mc_consistency(theorem_model, f, x, 1e-3, 10**6,
                                           SimConfig(dt=1e-3, seed=11), C=MC_C)
            rows.append((label, x, rep))
    elapsed = time.perf_counter() - t0
    bad = [(lab, x) for lab, x, r in rows if not abs(r.quotient - r.Lf) <= MC_SE_FACTOR * r.se + MC_C * r.h]
    ok = not bad and elapsed < 300
    worst = max(abs(r.quotient - r.Lf) / r.allowance for _, _, r in rows)
    record_criterion(2, ok, f"6 points, worst |diff| / allowance = {worst:.3g}, {elapsed:.1f}s")
    assert ok, bad


def test_c3_coupling_marginal_fidelity(example_models, record_criterion):
    t0 = time.perf_counter()
    times = [0.5, 1.0, 2.0]
    pvals = {}
    for name in EXAMPLES:
        m = example_models[name]
        cfg = SimConfig(dt=0.01, t_end=2.0, seed=31)
        rt, xs, _, _, bad = simulate_pairs(m, 2.0, 0.5, 10**4, CouplingConfig.from_sim(cfg), times)
        _, ref, rbad = simulate_states(m, 2.0, 10**4, cfg.replace(seed=32), times)
        for i, t in enumerate(rt):
            pvals[(name, float(t))] = stats.ks_2samp(xs[i][~bad], ref[i][~rbad]).pvalue
    elapsed = time.perf_counter() - t0
    low = min(pvals.values())
    ok = low > KS_LEVEL and elapsed < 300
    record_criterion(3, ok, f"9 KS tests, smallest p-value {low:.3g}, {elapsed:.1f}s")
    assert ok, pvals


def test_c4_certificate_pipeline(theorem_cert, record_criterion):
    c = theorem_cert
    anti = lyapunov_check(shipped("anti_example"), 0.5)
    ok = (c.verified and c.lam > 0 and c.grid_margin >= -c.slack_at_min
          and len(c.grid) == 8384 and not anti.holds)
    record_criterion(4, ok, f"verified={c.verified}, lambda={c.lam:.3g}, margin={c.grid_margin:.3g} "
                            f"vs slack {c.slack_at_min:.3g}; anti-example holds={anti.holds}")
    assert ok


def test_c5_exponential_contraction(theorem_model, theorem_cert, record_criterion):
    cfg = load_config("theorem_example")["sim"]
    ccfg = CouplingConfig(dt=cfg["dt"], t_end=5.0, seed=cfg["seed"])
    rec = np.linspace(0.0, 5.0, 26)
    t0 = time.perf_counter()
    rep = contraction_rate(theorem_model, theorem_cert, 5.0, 0.5, 10**4, ccfg, rec)
    elapsed = time.perf_counter() - t0
    rel = np.divide(rep.se, rep.mean_F, out=np.zeros_like(rep.se), where=rep.mean_F > 0)
    bound_ok = np.all(np.exp(theorem_cert.lam * rep.times) * rep.mean_F
                      <= rep.F0 * (1 + CONTRACTION_SE * rel) + 1e-12 * rep.F0)
    rate_ok = rep.fitted_rate >= RATE_FRACTION * theorem_cert.lam
    ok = bool(bound_ok and rate_ok and elapsed < 600)
    record_criterion(5, ok, f"fitted rate {rep.fitted_rate:.3g} vs certified {theorem_cert.lam:.3g}, "
                            f"bound holds at all {len(rep.times)} times={bool(bound_ok)}, {elapsed:.1f}s")
    assert ok


def test_c6_stickiness(example_models, record_criterion):
    violations = 0
    met = 0
    for name in EXAMPLES:
        times, xs, ys, T, _ = simulate_pairs(example_models[name], 2.0, 0.5, 10**4,
                                             CouplingConfig(dt=0.01, t_end=3.0, seed=41))
        violations += check_stickiness(times, xs, ys, T)
        met += int(np.isfinite(T).sum())
    ok = violations == 0 and met > 0
    record_criterion(6, ok, f"{violations} violations among {met} coalesced paths")
    assert ok


def test_c7_lyapunov_cross_check(example_models, record_criterion):
    worst = 0.0
    for name in EXAMPLES:
        m = example_models[name]
        th = load_config(name)["certify"]["theta_v"]
        for x in (0.1, 1.0, 10.0, 100.0):
            generic = apply_L(m, power_shift(th), x)
            ratio = float(lyapunov_ratio(m, th, x)[0]) * (1 + x) ** th
            worst = max(worst, abs(ratio - generic) / max(abs(generic), 1e-300))
    ok = worst <= LYAP_RTOL
    record_criterion(7, ok, f"worst relative error {worst:.3g}")
    assert ok


def test_c8_analytic_oracles(record_criterion):
    errs = []
    for b, sigma in ((0.0, 0.0), (0.5, 1.0)):
        m = make_model(b=b, sigma=sigma, mu=EXP_MU)
        for lam in (0.1, 1.0, 10.0):
            errs.append(abs(m.phi(lam) - (lam**2 / (1 + lam) + b * lam + 0.5 * sigma**2 * lam**2)))
    phi_ok = max(errs) <= PHI_ATOL
    mu = make_model(mu=EXP_MU).mu
    ov = max(abs(overlap_mass(mu, x) - math.exp(-abs(x))) for x in (-2.0, -0.5, 0.3, 1.0, 4.0))
    ov_ok = ov <= OVERLAP_ATOL
    half = {"atoms": [[0.5, 1.0]]}
    m1 = make_model(r={"form": "constant", "value": 1.0, "inf": 1.0}, q=half)
    herr = max(abs(m1.H(1.0) - 0.125), abs(m1.H(3.0)), abs(make_model().H(2.0)))
    h_ok = herr <= H_ATOL
    ok = phi_ok and ov_ok and h_ok
    record_criterion(8, ok, f"phi err {max(errs):.2g}, overlap err {ov:.2g}, H err {herr:.2g}")
    assert ok


def _pipeline(tmp, cfg_path, workers):
    out = tmp / f"w{workers}"
    codes = [cli.run(["certify", str(cfg_path), "-o", str(out), "--workers", str(workers)])]
    cert = str(out / "certificate.json")
    for cmd in ("simulate", "couple", "check-lyapunov", "check-criterion"):
        codes.append(cli.run([cmd, str(cfg_path), "-o", str(out), "--workers", str(workers)]))
    for cmd in ("rate", "stationary"):
        codes.append(cli.run([cmd, str(cfg_path), "-o", str(out), "--workers", str(workers),
                              "--certificate", cert]))
    return codes, {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_c9_determinism(tmp_path, record_criterion):
    cfg = load_config("theorem_example")
    cfg["sim"].update(n_paths=2000, t_end=2.0, record_times=[0.0, 0.5, 1.0, 1.5, 2.0],
                      burn_in=2.0, block_size=512)
    cfg["certify"]["n_grid"] = 16
    path = tmp_path / "det.yaml"
    path.write_text(yaml.safe_dump(cfg))
    run1 = _pipeline(tmp_path / "a", path, 1)
    run2 = _pipeline(tmp_path / "b", path, 1)
    run8 = _pipeline(tmp_path / "c", path, 8)
    codes_ok = all(c == 0 for c in run1[0] + run2[0] + run8[0])
    same = run1[1] == run2[1] == run8[1]
    ok = codes_ok and same and len(run1[1]) == 14
    record_criterion(9, ok, f"{len(run1[1])} files byte-identical across reruns and workers 1 vs 8: "
                            f"{same}")
    assert ok
