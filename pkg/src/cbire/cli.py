"""Command-line front end.

Exit codes: 0 success, 1 model or condition failure, 2 numerical failure or
malformed input.  Every artifact is written atomically and carries the hash
of the config that produced it.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import INTERFACE_REVISION, __version__
from .certify import DriftCertificate, certify
from .config import ConfigError, certificate_key, config_hash, load_config
from .coupling import CouplingConfig, simulate_pairs
from .ergodicity import contraction_rate, stationary_estimate
from .errors import (AdmissibilityError, ConditionError, DomainError, InstabilityError,
                     NumericalError, UnsupportedCouplingError)
from .generator import lyapunov_check
from .model import ergodicity_criterion, model_from_config
from .quadrature import QuadratureConfig
from .simulate import SimConfig, simulate_ensemble

CONDITION_NAMES = {
    "immigration": "immigration condition (alpha = gamma(0) > 0, Lipschitz catastrophe rate)",
    "lyapunov": "Lyapunov condition (L V <= lambda2 - lambda1 V)",
    "nontriviality": "non-triviality of the branching mechanism",
    "negative_jump_tail": "negative-jump tail condition (H(x)/V(x) -> 0)",
    "criterion": "large-state ergodicity criterion",
    "drift": "drift inequality L~F <= -lambda F on the verification grid",
}

_SIM_KEYS = ("dt", "t_end", "eps_mu", "eps_nu", "seed", "negative_fixup", "overflow_guard",
             "substep_jump_cap", "small_jump_topup", "block_size")


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# output helpers ----------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def write_atomic(path: Path, text: str) -> None:
    """Write ``text`` to a temp file beside ``path`` and rename it into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_text(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _csv_text(header: str, rows, chash: str) -> str:
    lines = [f"# config_hash={chash}", header]
    for row in rows:
        lines.append(",".join(format(float(v), ".17g") for v in row))
    return "\n".join(lines) + "\n"


class _Run:
    """Resolved config, model and output location for one subcommand."""

    def __init__(self, args):
        self.cfg = load_config(args.config)
        self.hash = config_hash(self.cfg)
        self.key = certificate_key(self.cfg)
        q = self.cfg.get("quadrature") or {}
        quad = QuadratureConfig(**q) if q else QuadratureConfig()
        self.model = model_from_config(self.cfg["model"], quad=quad)
        self.sim = dict(self.cfg.get("sim") or {})
        self.cert_cfg = dict(self.cfg.get("certify") or {})
        out = self.cfg.get("output") or {}
        self.outdir = Path(args.out if args.out is not None else out.get("dir", "."))
        self.prefix = out.get("prefix", "")
        self.workers = _workers(args, self.sim)
        if args.seed is not None:
            self.sim["seed"] = args.seed

    def sim_config(self, cls=SimConfig, **extra):
        kw = {k: self.sim[k] for k in _SIM_KEYS if k in self.sim}
        kw["workers"] = self.workers
        kw.update(extra)
        if cls is CouplingConfig and "match_tol" in self.sim:
            kw.setdefault("match_tol", self.sim["match_tol"])
        return cls(**kw)

    def path(self, name: str) -> Path:
        return self.outdir / f"{self.prefix}{name}"

    def write_json(self, name: str, payload: dict) -> None:
        payload = dict(payload, config_hash=self.hash)
        write_atomic(self.path(name), _json_text(payload))

    def write_csv(self, name: str, header: str, rows) -> None:
        write_atomic(self.path(name), _csv_text(header, rows, self.hash))

    def theta_v(self) -> float:
        return float(self.cert_cfg.get("theta_v", 0.5))

    def record_times(self):
        rt = self.sim.get("record_times")
        return None if rt is None else [float(t) for t in rt]

    def certificate(self, path: str | None) -> DriftCertificate:
        """Load a certificate with a matching key, or derive one."""
        if path is None:
            return self.run_certify()
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise _Fail(2, f"cannot read certificate {path}: {exc}") from exc
        if data.get("certificate_key") != self.key:
            raise _Fail(2, f"certificate {path} was produced for a different model/certify config "
                           "(hash mismatch); refusing to use it")
        return DriftCertificate.from_dict(data)

    def run_certify(self) -> DriftCertificate:
        c = self.cert_cfg
        return certify(self.model, self.theta_v(), K=c.get("K"), c0=c.get("c0"), x0=c.get("x0"),
                       n_grid=int(c.get("n_grid", 64)), rebalance=c.get("rebalance", True),
                       workers=self.workers)


def _workers(args, sim) -> int:
    if args.workers is not None:
        w = args.workers
    elif os.environ.get("CBIRE_WORKERS"):
        try:
            w = int(os.environ["CBIRE_WORKERS"])
        except ValueError as exc:
            raise ConfigError("CBIRE_WORKERS must be an integer", "$env.CBIRE_WORKERS") from exc
    else:
        w = int(sim.get("workers", 1))
    if w < 1:
        raise ConfigError("worker count must be positive", "$.sim.workers")
    return w


# subcommands -------------------------------------------------------------------------------


def cmd_simulate(run: _Run, args) -> int:
    cfg = run.sim_config()
    x0 = float(run.sim.get("x0", 1.0))
    n = int(run.sim.get("n_paths", 1000))
    summ = simulate_ensemble(run.model, x0, n, cfg, record_times=run.record_times())
    s = summ.stats["x"]
    rows = zip(summ.times, s["mean"], s["var"], s["q05"], s["q50"], s["q95"])
    run.write_csv("simulate.csv", "t,mean,var,q05,q50,q95", rows)
    run.write_json("simulate.json", {"x0": x0, "n_paths": summ.n_paths,
                                     "n_excluded": summ.n_excluded, "t_end": cfg.t_end})
    return 0


def cmd_couple(run: _Run, args) -> int:
    cfg = run.sim_config(CouplingConfig)
    x0 = float(run.sim.get("x0", 1.0))
    y0 = float(run.sim.get("y0", 0.0))
    n = int(run.sim.get("n_paths", 1000))
    times, xs, ys, T, bad = simulate_pairs(run.model, x0, y0, n, cfg, run.record_times())
    keep = ~bad
    xs, ys, T = xs[:, keep], ys[:, keep], T[keep]
    if args.certificate:
        cert = run.certificate(args.certificate)
        Fv, kind = cert.controls.F(xs, ys), "certificate F"
    else:
        th = run.theta_v()
        Fv = np.where(xs != ys, (1 + xs) ** th + (1 + ys) ** th, 0.0)
        kind = "d_V = (V(x) + V(y)) 1{x != y}"
    rows = zip(times, np.abs(xs - ys).mean(axis=1), [np.mean(T <= t) for t in times],
               Fv.mean(axis=1))
    run.write_csv("couple.csv", "t,mean_abs_diff,p_coupled,mean_F", rows)
    met = np.isfinite(T)
    run.write_json("couple.json", {
        "x0": x0, "y0": y0, "n_paths": int(keep.sum()), "n_excluded": int(bad.sum()),
        "mean_F_kind": kind, "frac_coupled": float(met.mean()) if T.size else math.nan,
        "mean_T": float(T[met].mean()) if met.any() else math.inf})
    return 0


def cmd_check_lyapunov(run: _Run, args) -> int:
    rep = lyapunov_check(run.model, run.theta_v())
    margin = rep.profile_margin() if rep.holds else -rep.LV
    run.write_csv("lyapunov.csv", "x,V,LV,margin", zip(rep.grid, rep.V, rep.LV, margin))
    run.write_json("lyapunov.json", rep.to_dict())
    if not rep.holds:
        raise ConditionError("lyapunov", f"lambda1 = {rep.lambda1:.6g} is not positive")
    return 0


def cmd_check_criterion(run: _Run, args) -> int:
    rep = ergodicity_criterion(run.model, run.theta_v())
    run.write_csv("criterion.csv", "x,profile", zip(rep.grid, rep.tail_profile))
    run.write_json("criterion.json", rep.to_dict())
    if not rep.holds:
        raise ConditionError("criterion", f"criterion total = {rep.total:.6g} is not negative")
    return 0


def cmd_certify(run: _Run, args) -> int:
    cert = run.run_certify()
    payload = cert.to_dict()
    payload["certificate_key"] = run.key
    run.write_json("certificate.json", payload)
    run.write_csv("certificate_margin.csv", "x,y,F,LF,margin", cert.margin_table())
    if not cert.verified:
        pts = ", ".join(f"({x:.4g}, {y:.4g})" for x, y, _ in cert.offending[:5])
        raise ConditionError("drift", f"grid margin {cert.grid_margin:.6g}; offending points {pts}")
    return 0


def cmd_rate(run: _Run, args) -> int:
    cert = run.certificate(args.certificate)
    if not cert.verified:
        raise ConditionError("drift", "the certificate is not verified")
    cfg = run.sim_config(CouplingConfig)
    x0 = float(run.sim.get("x0", 5.0))
    y0 = float(run.sim.get("y0", 0.5))
    n = int(run.sim.get("n_paths", 10000))
    rep = contraction_rate(run.model, cert, x0, y0, n, cfg, run.record_times(),
                           bins=int(run.sim.get("bins", 128)))
    rows = zip(rep.times, rep.mean_F, rep.se, rep.coupling_bound, rep.wv)
    run.write_csv("rate.csv", "t,mean_F,se,coupling_bound,wv", rows)
    payload = rep.to_dict()
    payload.update(x0=x0, y0=y0, certificate_key=run.key)
    run.write_json("rate.json", payload)
    return 0


def cmd_stationary(run: _Run, args) -> int:
    certified = False
    if args.certificate:
        certified = run.certificate(args.certificate).verified
    cfg = run.sim_config(t_end=0.0)
    starts = tuple(float(s) for s in run.sim.get("starts", [0.0, 10.0]))
    est = stationary_estimate(run.model, cfg, float(run.sim.get("burn_in", 10.0)),
                              int(run.sim.get("n_paths", 10000)), starts, certified)
    rows = [(s, x) for s, xs in est.by_start.items() for x in xs]
    run.write_csv("stationary.csv", "start,x", rows)
    run.write_json("stationary.json", est.summary())
    return 0


COMMANDS = {
    "simulate": cmd_simulate, "couple": cmd_couple, "check-lyapunov": cmd_check_lyapunov,
    "check-criterion": cmd_check_criterion, "certify": cmd_certify, "rate": cmd_rate,
    "stationary": cmd_stationary,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbire", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="store_true", help="print version JSON and exit")
    sub = p.add_subparsers(dest="command")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config", help="YAML/JSON run config or a shipped example name")
        sp.add_argument("-o", "--out", default=None, help="output directory")
        sp.add_argument("--workers", type=int, default=None,
                        help="threads (overrides CBIRE_WORKERS and the config)")
        sp.add_argument("--seed", type=int, default=None, help="override sim.seed")
        if name in ("couple", "rate", "stationary"):
            sp.add_argument("--certificate", default=None, help="certificate JSON from `certify`")
    return p


def version_info() -> dict:
    return {"package": "cbire", "version": __version__, "interface_revision": INTERFACE_REVISION}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.version:
        print(json.dumps(version_info(), sort_keys=True))
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        r = _Run(args)
        return COMMANDS[args.command](r, args)
    except ConfigError as exc:
        print(f"error: malformed config at {exc.path}: {exc}", file=sys.stderr)
        return 2
    except ConditionError as exc:
        name = CONDITION_NAMES.get(exc.condition, exc.condition)
        print(f"error: {name} failed: {exc}", file=sys.stderr)
        return 1
    except AdmissibilityError as exc:
        print(f"error: model not admissible: {exc}", file=sys.stderr)
        return 1
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (NumericalError, InstabilityError, UnsupportedCouplingError, DomainError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
