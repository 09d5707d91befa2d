"""Time-discretized simulation of the branching process in a random environment.

One step of length ``dt`` applies, in this order:

1. drift ``gamma(x) + beta0 x`` minus the compensators of the large jumps,
2. Gaussian noise ``sigma sqrt(x+) dW + beta1 x dB`` (full truncation),
3. branching jumps larger than ``eps_mu`` (Poisson count, summed sizes),
4. environment jumps with ``|z| > eps_nu``, applied as the exact factor ``e^z``,
5. catastrophes by thinning a dominating rate, each accepted event
   multiplying the state by a factor drawn from ``q``,
6. the negative-value fixup.

Compensated jumps below the truncation levels have mean zero and are
dropped, optionally replaced by a Gaussian with matching variance.

Random numbers come from PCG64 streams keyed by ``(seed, block)``, where a
block is a fixed-size batch of paths.  Results therefore do not depend on how
blocks are spread over worker threads.
"""

from __future__ import annotations

import dataclasses
import math
import threading
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, InstabilityError
from .measures import Interval, JumpMeasure
from .model import ModelSpec, ScalarFunction

_POS_DEPTH = 20


@dataclass(frozen=True)
class SimConfig:
    """Discretization and reproducibility settings.

    Attributes
    ----------
    dt : float
        Base step.
    t_end : float
        Horizon; the grid is ``0, dt, ..., t_end`` (last step shortened if
        ``t_end`` is not a multiple of ``dt``).
    eps_mu, eps_nu : float
        Jump truncation levels for ``mu`` and ``nu``.
    seed : int
        Root seed of the PCG64 streams.
    negative_fixup : {"clamp", "reject-step"}
        ``clamp`` sets negative states to zero; ``reject-step`` redoes the
        offending step as two half steps (then clamps as a last resort).
    overflow_guard : float
        States above this raise (single paths) or are excluded (ensembles).
    substep_jump_cap : int
        More branching plus environment jumps than this in one step triggers
        step halving for that path.
    small_jump_topup : bool
        Replace truncated compensated jumps by Gaussians with their variance.
    block_size : int
        Paths per RNG block.
    workers : int
        Threads used for blocks; never changes results.
    """

    dt: float = 1e-2
    t_end: float = 1.0
    eps_mu: float = 1e-2
    eps_nu: float = 1e-2
    seed: int = 0
    negative_fixup: str = "clamp"
    overflow_guard: float = 1e12
    substep_jump_cap: int = 64
    small_jump_topup: bool = False
    block_size: int = 4096
    workers: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError("dt must be positive")
        if not (self.eps_mu > 0 and self.eps_nu > 0):
            raise DomainError("truncation levels must be positive")
        if self.t_end < 0:
            raise DomainError("t_end must be nonnegative")
        if self.negative_fixup not in ("clamp", "reject-step"):
            raise DomainError("negative_fixup must be 'clamp' or 'reject-step'")
        if self.block_size < 1 or self.substep_jump_cap < 1:
            raise DomainError("block_size and substep_jump_cap must be positive")

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    @property
    def times(self) -> np.ndarray:
        """Simulation grid from 0 to ``t_end``."""
        if self.t_end == 0:
            return np.zeros(1)
        n = int(math.floor(self.t_end / self.dt + 1e-9))
        t = self.dt * np.arange(n + 1)
        if self.t_end - t[-1] > 1e-9 * self.dt:
            t = np.append(t, self.t_end)
        else:
            t[-1] = self.t_end
        return t


class SimConstants:
    """Truncated masses, compensators and samplers for one model and config."""

    def __init__(self, model: ModelSpec, cfg: SimConfig):
        self.model = model
        mu, nu = model.mu, model.nu
        big_mu = Interval(cfg.eps_mu, math.inf, False, False)
        small_mu = Interval(0.0, cfg.eps_mu, False, True)
        big_nu = (Interval(-math.inf, -cfg.eps_nu, False, False),
                  Interval(cfg.eps_nu, math.inf, False, False))
        small_nu = Interval(-cfg.eps_nu, cfg.eps_nu, True, True)

        def cached(meas: JumpMeasure, key, fn):
            return meas.cached(key, fn)

        if mu.is_zero:
            self.mu_mass = self.mu_mean = self.mu_small_var = 0.0
            self.mu_sampler = None
        else:
            e = cfg.eps_mu
            self.mu_mass = cached(mu, ("sim_mass", e), lambda: mu.integrate(
                lambda z: np.ones(np.shape(z)), big_mu))
            self.mu_mean = cached(mu, ("sim_mean", e), lambda: mu.integrate(lambda z: z, big_mu))
            self.mu_small_var = cached(mu, ("sim_var", e), lambda: mu.integrate(
                lambda z: z * z, small_mu))
            self.mu_sampler = mu.sampler(big_mu) if self.mu_mass > 0 else None
        if nu.is_zero:
            self.nu_mass = self.nu_comp = self.nu_small_var = 0.0
            self.nu_sampler = None
        else:
            e = cfg.eps_nu
            self.nu_mass = cached(nu, ("sim_mass", e), lambda: nu.integrate(
                lambda z: np.ones(np.shape(z)), big_nu))
            self.nu_comp = cached(nu, ("sim_comp", e), lambda: nu.integrate(
                lambda z: np.expm1(z), big_nu, growth=1.0))
            self.nu_small_var = cached(nu, ("sim_var", e), lambda: nu.integrate(
                lambda z: np.expm1(z) ** 2, small_nu))
            self.nu_sampler = nu.sampler(big_nu) if self.nu_mass > 0 else None
        self.q_sampler = model.q.sampler(model.q.support)
        self.cat_on = not (model.r.form == "constant" and model.r.params[0] == 0.0)

    def rate_bound(self, x: np.ndarray) -> np.ndarray:
        """A rate dominating ``r`` on ``[0, x]``."""
        return rate_bound(self.model.r, self.model.k0, x)


def rate_bound(r: ScalarFunction, k0: float, x: np.ndarray) -> np.ndarray:
    """Upper bound for ``sup_{[0, x]} r`` using monotone forms when possible."""
    x = np.asarray(x, dtype=float)
    if r.form == "constant":
        return np.full(x.shape, r.params[0])
    if r.form == "affine" or (r.form == "power" and r.params[1] >= 0):
        return np.maximum(np.asarray(r(x)), float(r(0.0)))
    return np.asarray(r(x)) + k0 * x


_CONST_CACHE: "weakref.WeakKeyDictionary[ModelSpec, dict]" = weakref.WeakKeyDictionary()
_CONST_LOCK = threading.Lock()


def _constants(model: ModelSpec, cfg: SimConfig) -> SimConstants:
    key = (cfg.eps_mu, cfg.eps_nu)
    with _CONST_LOCK:
        per_model = _CONST_CACHE.setdefault(model, {})
        if key not in per_model:
            per_model[key] = SimConstants(model, cfg)
        return per_model[key]


_LOG_FIELDS = ("gauss", "branching", "environment", "catastrophe", "compensator")


def _continuous(model, c, x, dt, rng, cfg, log, idx):
    n = x.size
    xp = np.maximum(x, 0.0)
    comp = -(c.mu_mean + c.nu_comp) * x
    drift = np.asarray(model.gamma(x)) + model.beta0 * x + comp
    dW = rng.standard_normal(n)
    dB = rng.standard_normal(n)
    sq = math.sqrt(dt)
    gauss = model.sigma * np.sqrt(xp) * sq * dW + model.beta1 * x * sq * dB
    if cfg.small_jump_topup:
        z3 = rng.standard_normal(n)
        z4 = rng.standard_normal(n)
        gauss = gauss + np.sqrt(xp * c.mu_small_var * dt) * z3 + x * math.sqrt(c.nu_small_var * dt) * z4
    if log is not None:
        log["gauss"][idx] += gauss
        log["compensator"][idx] += comp * dt
    return x + drift * dt + gauss, dW, dB


def _aggregate(sampler, counts: np.ndarray, rng) -> np.ndarray:
    total = int(counts.sum())
    out = np.zeros(counts.size)
    if total == 0:
        return out
    z, _ = sampler.sample(rng, total)
    owner = np.repeat(np.arange(counts.size), counts)
    return np.bincount(owner, weights=z, minlength=counts.size)


def _catastrophes(model, c, x, dt, rng, log, idx):
    """Thinning of the state-dependent catastrophe rate, one round per event."""
    if not c.cat_on:
        return x
    xp = np.maximum(x, 0.0)
    bound = c.rate_bound(xp)
    counts = rng.poisson(np.maximum(bound, 0.0) * dt)
    factor = np.ones(x.size)
    cur = xp.copy()
    active = np.nonzero(counts > 0)[0]
    k = 0
    while active.size:
        u = rng.random(active.size) * bound[active]
        z, _ = c.q_sampler.sample(rng, active.size)
        acc = u < np.asarray(model.r(cur[active]))
        hit = active[acc]
        cur[hit] *= z[acc]
        factor[hit] *= z[acc]
        k += 1
        active = active[counts[active] > k]
    if log is not None:
        log["catastrophe"][idx] *= factor
    return np.where(x > 0, x * factor, x)


def _step_array(model: ModelSpec, c: SimConstants, x: np.ndarray, dt: float,
                rng: np.random.Generator, cfg: SimConfig, log=None, idx=None,
                depth: int = 0) -> np.ndarray:
    n = x.size
    if idx is None:
        idx = np.arange(n)
    xp = np.maximum(x, 0.0)
    nb = rng.poisson(xp * dt * c.mu_mass) if c.mu_sampler is not None else np.zeros(n, dtype=np.int64)
    ne = rng.poisson(dt * c.nu_mass, n) if c.nu_sampler is not None else np.zeros(n, dtype=np.int64)
    heavy = (nb + ne) > cfg.substep_jump_cap
    out = np.empty(n)
    if np.any(heavy) and depth < _POS_DEPTH:
        h = np.nonzero(heavy)[0]
        mid = _step_array(model, c, x[h], dt / 2, rng, cfg, log, idx[h], depth + 1)
        out[h] = _step_array(model, c, mid, dt / 2, rng, cfg, log, idx[h], depth + 1)
        light = np.nonzero(~heavy)[0]
    else:
        light = np.arange(n)
    if light.size:
        xl = x[light]
        x1, _, _ = _continuous(model, c, xl, dt, rng, cfg, log, idx[light])
        if c.mu_sampler is not None:
            jumps = _aggregate(c.mu_sampler, nb[light], rng)
            x1 = x1 + jumps
            if log is not None:
                log["branching"][idx[light]] += jumps
        if c.nu_sampler is not None:
            logs = _aggregate(c.nu_sampler, ne[light], rng)
            x1 = x1 * np.exp(logs)
            if log is not None:
                log["environment"][idx[light]] += logs
        x1 = _catastrophes(model, c, x1, dt, rng, log, idx[light])
        neg = x1 < 0
        if cfg.negative_fixup == "reject-step" and np.any(neg) and depth < _POS_DEPTH:
            bad = np.nonzero(neg)[0]
            sub = light[bad]
            mid = _step_array(model, c, x[sub], dt / 2, rng, cfg, log, idx[sub], depth + 1)
            x1[bad] = _step_array(model, c, mid, dt / 2, rng, cfg, log, idx[sub], depth + 1)
        out[light] = x1
    return np.maximum(out, 0.0)


def step(model: ModelSpec, x: float, dt: float, rng: np.random.Generator, cfg: SimConfig) -> float:
    """Advance a single state by one step of length ``dt``.

    Raises
    ------
    InstabilityError
        If the new state exceeds ``cfg.overflow_guard``.
    """
    if x < 0:
        raise DomainError("state must be nonnegative")
    if dt > cfg.dt * (1 + 1e-12):
        raise DomainError("dt must not exceed the configured step")
    c = _constants(model, cfg)
    xn = float(_step_array(model, c, np.array([float(x)]), dt, rng, cfg)[0])
    if not (math.isfinite(xn) and xn <= cfg.overflow_guard):
        raise InstabilityError(f"state {xn!r} exceeded the overflow guard")
    return xn


def block_rng(seed: int, block: int) -> np.random.Generator:
    """The PCG64 stream owned by one block of paths."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(block,))))


@dataclass
class SamplePath:
    """One simulated trajectory.

    ``event_log`` maps each of ``gauss``, ``branching`` (summed jump sizes),
    ``environment`` (summed log factors), ``catastrophe`` (product of
    factors) and ``compensator`` (drift correction) to a per-step array.
    """

    times: np.ndarray
    states: np.ndarray
    event_log: dict | None = None

    def to_csv(self) -> str:
        lines = ["t,x"]
        lines += [f"{t:.17g},{x:.17g}" for t, x in zip(self.times, self.states)]
        return "\n".join(lines) + "\n"


def _run_block(model, c, x0, n, cfg, rng, record_idx, log=None):
    times = cfg.times
    x = np.full(n, float(x0))
    rec = np.empty((len(record_idx), n))
    bad = np.zeros(n, dtype=bool)
    rpos = 0
    if record_idx[0] == 0:
        rec[0] = x
        rpos = 1
    for k in range(1, len(times)):
        dt = times[k] - times[k - 1]
        live = np.nonzero(~bad)[0]
        if live.size:
            xn = _step_array(model, c, x[live], dt, rng, cfg, log, live)
            over = ~np.isfinite(xn) | (xn > cfg.overflow_guard)
            if np.any(over):
                bad[live[over]] = True
                xn[over] = np.nan
            x[live] = xn
        if rpos < len(record_idx) and record_idx[rpos] == k:
            rec[rpos] = x
            rpos += 1
    return rec, bad


def simulate_path(model: ModelSpec, x0: float, cfg: SimConfig, event_log: bool = False) -> SamplePath:
    """Simulate one path on the grid ``cfg.times``.

    Raises
    ------
    InstabilityError
        With the path prefix attached, when the overflow guard is hit.
    """
    if x0 < 0:
        raise DomainError("x0 must be nonnegative")
    c = _constants(model, cfg)
    rng = block_rng(cfg.seed, 0)
    times = cfg.times
    log = None
    if event_log:
        log = {k: np.zeros(1) for k in _LOG_FIELDS}
        log["catastrophe"] = np.ones(1)
    states = np.empty(len(times))
    states[0] = x0
    logs = {k: np.zeros(len(times) - 1) for k in _LOG_FIELDS} if event_log else None
    x = np.array([float(x0)])
    for k in range(1, len(times)):
        if log is not None:
            for key in _LOG_FIELDS:
                log[key][:] = 1.0 if key == "catastrophe" else 0.0
        x = _step_array(model, c, x, times[k] - times[k - 1], rng, cfg, log)
        if not (np.isfinite(x[0]) and x[0] <= cfg.overflow_guard):
            prefix = SamplePath(times[:k], states[:k], None)
            raise InstabilityError(f"state exceeded the overflow guard at t={times[k]:g}", prefix)
        states[k] = x[0]
        if logs is not None:
            for key in _LOG_FIELDS:
                logs[key][k - 1] = log[key][0]
    return SamplePath(times, states, logs)


def _blocks(n: int, block_size: int):
    return [(b, b * block_size, min(n, (b + 1) * block_size)) for b in range(-(-n // block_size))]


def run_blocks(task: Callable[[int, int], object], n: int, cfg: SimConfig) -> list:
    """Run ``task(block, size)`` over all blocks and return results in block order."""
    blocks = _blocks(n, cfg.block_size)
    if cfg.workers <= 1 or len(blocks) == 1:
        return [task(b, hi - lo) for b, lo, hi in blocks]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(lambda blk: task(blk[0], blk[2] - blk[1]), blocks))


def simulate_states(model: ModelSpec, x0, n: int, cfg: SimConfig, record_times=None):
    """States of ``n`` independent paths at the recorded grid indices.

    Parameters
    ----------
    x0 : float
        Common initial state.
    record_times : sequence of float, optional
        Times to record (snapped to the grid); defaults to the whole grid.

    Returns
    -------
    times : ndarray
    states : ndarray, shape (len(times), n), ``nan`` for excluded paths
    excluded : ndarray of bool
    """
    if n < 1:
        raise DomainError("n must be positive")
    if x0 < 0:
        raise DomainError("x0 must be nonnegative")
    grid = cfg.times
    if record_times is None:
        record_idx = np.arange(len(grid))
    else:
        record_idx = np.unique([int(np.argmin(np.abs(grid - t))) for t in record_times])
    c = _constants(model, cfg)

    def task(block, size):
        return _run_block(model, c, x0, size, cfg, block_rng(cfg.seed, block), record_idx)

    parts = run_blocks(task, n, cfg)
    states = np.concatenate([p[0] for p in parts], axis=1)
    bad = np.concatenate([p[1] for p in parts])
    return grid[record_idx], states, bad


def simulate_terminal(model: ModelSpec, x0: float, n: int, cfg: SimConfig) -> np.ndarray:
    """States at ``cfg.t_end`` of ``n`` paths, excluding unstable ones."""
    _, states, bad = simulate_states(model, x0, n, cfg, [cfg.t_end])
    return states[-1][~bad]


@dataclass
class EnsembleSummary:
    """Per-time statistics of observables over an ensemble.

    ``stats[name]`` is a dict of arrays ``mean``, ``var``, ``q05``, ``q50``,
    ``q95`` indexed like ``times``.
    """

    times: np.ndarray
    stats: dict
    n_paths: int
    n_excluded: int

    def to_csv(self, name: str | None = None) -> str:
        name = name or next(iter(self.stats))
        s = self.stats[name]
        lines = ["t,mean,var,q05,q50,q95"]
        for i, t in enumerate(self.times):
            row = [t, s["mean"][i], s["var"][i], s["q05"][i], s["q50"][i], s["q95"][i]]
            lines.append(",".join(f"{v:.17g}" for v in row))
        return "\n".join(lines) + "\n"


def summarize(times, states, bad, observables: dict) -> EnsembleSummary:
    good = states[:, ~bad]
    stats = {}
    for name, fn in observables.items():
        vals = np.asarray(fn(good), dtype=float)
        if vals.shape[1] == 0:
            nan = np.full(len(times), np.nan)
            stats[name] = {k: nan for k in ("mean", "var", "q05", "q50", "q95")}
            continue
        q = np.quantile(vals, [0.05, 0.5, 0.95], axis=1)
        stats[name] = {
            "mean": vals.mean(axis=1),
            "var": vals.var(axis=1, ddof=1) if vals.shape[1] > 1 else np.zeros(len(times)),
            "q05": q[0], "q50": q[1], "q95": q[2],
        }
    return EnsembleSummary(np.asarray(times), stats, int(states.shape[1]), int(bad.sum()))


def simulate_ensemble(model: ModelSpec, x0: float, n: int, cfg: SimConfig,
                      observables: dict | Sequence[Callable] | None = None,
                      record_times=None) -> EnsembleSummary:
    """Simulate ``n`` paths and summarize observables at each recorded time.

    Unstable paths are excluded and counted.  The summary is independent of
    ``cfg.workers``.
    """
    if observables is None:
        observables = {"x": lambda s: s}
    elif not isinstance(observables, dict):
        observables = {f"obs{i}": fn for i, fn in enumerate(observables)}
    times, states, bad = simulate_states(model, x0, n, cfg, record_times)
    return summarize(times, states, bad, observables)
