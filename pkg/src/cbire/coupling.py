"""Simulation of the Markov coupling of two copies of the process.

Before the pair meets:

* the Brownian motions of the second copy are the negatives of those of the
  first (reflection coupling),
* branching jumps follow the refined basic coupling.  One proposal stream at
  rate ``(x v y) mu`` is split by a shared uniform level into five moves:
  coalesce to ``(x+z, x+z)``, reflect to ``(x+z, 2y-x+z)``, common
  ``(x+z, y+z)``, and jumps of the larger coordinate alone,
* environment jumps are synchronous,
* catastrophes use the basic coupling: shared proposals and a shared factor,
  accepted by each coordinate according to its own rate.

On a grid the meeting time is detected by a sign change of ``x - y``, a
Brownian-bridge crossing test, or ``|x - y| < match_tol``.  From then on
``y`` is set to ``x`` and a single copy evolves, so the coordinates stay
bitwise equal.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .errors import CBIREError, DomainError, InstabilityError
from .measures import rho_pairs
from .model import ModelSpec
from .simulate import SimConfig, _constants, block_rng, run_blocks

# event codes for branching jumps
COALESCE, REFLECT, COMMON, X_ONLY, Y_ONLY = range(5)
EVENT_NAMES = ("sync-to-x-level", "reflect-about-y", "common", "x-only", "y-only")
CAT_NAMES = ("common", "x-only", "y-only")


@dataclass(frozen=True)
class CouplingConfig(SimConfig):
    """Simulation settings plus the coalescence threshold.

    ``match_tol`` defaults to ``1e-9 * (1 + max(x0, y0))`` when left as
    ``None``; ``post_match_policy`` is always ``"identify"``.
    """

    match_tol: float | None = None
    post_match_policy: str = "identify"

    def __post_init__(self):
        super().__post_init__()
        if self.match_tol is not None and not self.match_tol > 0:
            raise DomainError("match_tol must be positive")
        if self.post_match_policy != "identify":
            raise DomainError("only the 'identify' post-match policy is supported")

    def tol_for(self, x0: float, y0: float) -> float:
        if self.match_tol is not None:
            return self.match_tol
        return 1e-9 * (1.0 + max(x0, y0))

    @classmethod
    def from_sim(cls, cfg: SimConfig, **kw) -> "CouplingConfig":
        return cls(**dataclasses.asdict(cfg), **kw)


@dataclass
class CoupledPath:
    """A coupled trajectory with its coalescence time.

    ``T`` is ``inf`` when the pair has not met by ``t_end``.  ``event_log``
    holds a list of ``(step, kind, label)`` tuples for branching (``kind``
    ``"branching"``) and catastrophe (``kind`` ``"catastrophe"``) events.
    """

    times: np.ndarray
    x_states: np.ndarray
    y_states: np.ndarray
    T: float
    event_log: list | None = None

    def to_csv(self) -> str:
        lines = ["t,x,y"]
        lines += [f"{t:.17g},{x:.17g},{y:.17g}" for t, x, y in
                  zip(self.times, self.x_states, self.y_states)]
        return "\n".join(lines) + "\n"


class _Events:
    def __init__(self):
        self.items = []
        self.step = 0

    def add(self, kind, labels):
        for lab in np.atleast_1d(labels):
            self.items.append((self.step, kind, int(lab)))


def _classify(mu, z, is_atom, u, m, U):
    """Branching move code for proposals with shared level ``u``."""
    dens = ~is_atom
    rc = np.where(dens, rho_pairs(mu, -U, z), 0.0)
    rr = np.where(dens, rho_pairs(mu, U, z), 0.0)
    c1 = 0.5 * m * rc
    c2 = c1 + 0.5 * m * rr
    code = np.where(u < c1, COALESCE, np.where(u < c2, REFLECT, np.where(u < m, COMMON, -1)))
    return code


def _coupled_step(model: ModelSpec, c, x, y, dt, rng, cfg, events=None, depth=0):
    """One coupled step for arrays of uncoupled pairs; returns new (x, y, met)."""
    n = x.size
    xp, yp = np.maximum(x, 0.0), np.maximum(y, 0.0)
    hi = np.maximum(xp, yp)
    nb = rng.poisson(hi * dt * c.mu_mass) if c.mu_sampler is not None else np.zeros(n, dtype=np.int64)
    ne = rng.poisson(dt * c.nu_mass, n) if c.nu_sampler is not None else np.zeros(n, dtype=np.int64)
    heavy = (nb + ne) > cfg.substep_jump_cap
    xo, yo, met = np.empty(n), np.empty(n), np.zeros(n, dtype=bool)
    if np.any(heavy) and depth < 20:
        h = np.nonzero(heavy)[0]
        x1, y1, m1 = _coupled_step(model, c, x[h], y[h], dt / 2, rng, cfg, events, depth + 1)
        x2, y2, m2 = _coupled_step(model, c, x1, y1, dt / 2, rng, cfg, events, depth + 1)
        # pairs that met in the first half continue as one copy
        y2 = np.where(m1, x2, y2)
        xo[h], yo[h], met[h] = x2, y2, m1 | m2
        light = np.nonzero(~heavy)[0]
    else:
        light = np.arange(n)
    if light.size == 0:
        return xo, yo, met
    x, y, xp, yp, nb, ne = x[light], y[light], xp[light], yp[light], nb[light], ne[light]
    k = light.size

    # continuous part with reflected noises
    sq = math.sqrt(dt)
    dW = rng.standard_normal(k)
    dB = rng.standard_normal(k)
    comp = c.mu_mean + c.nu_comp
    drift_x = np.asarray(model.gamma(x)) + model.beta0 * x - comp * x
    drift_y = np.asarray(model.gamma(y)) + model.beta0 * y - comp * y
    gx = model.sigma * np.sqrt(xp) * sq * dW + model.beta1 * x * sq * dB
    gy = -model.sigma * np.sqrt(yp) * sq * dW - model.beta1 * y * sq * dB
    if cfg.small_jump_topup:
        z3 = rng.standard_normal(k)
        z4 = rng.standard_normal(k)
        gx = gx + np.sqrt(xp * c.mu_small_var * dt) * z3 + x * math.sqrt(c.nu_small_var * dt) * z4
        gy = gy - np.sqrt(yp * c.mu_small_var * dt) * z3 - y * math.sqrt(c.nu_small_var * dt) * z4
    x1 = x + drift_x * dt + gx
    y1 = y + drift_y * dt + gy
    u0 = x - y
    u1 = x1 - y1
    # crossing of the difference process within the step
    s2 = (model.sigma * (np.sqrt(xp) + np.sqrt(yp))) ** 2 + (model.beta1 * (xp + yp)) ** 2
    crossed = np.sign(u1) != np.sign(u0)
    same = ~crossed & (s2 > 0)
    p_cross = np.zeros(k)
    p_cross[same] = np.exp(-2.0 * u0[same] * u1[same] / (s2[same] * dt))
    v = rng.random(k)
    joined = crossed | (v < p_cross)
    y1 = np.where(joined, x1, y1)

    # branching jumps under the refined basic coupling
    if c.mu_sampler is not None and nb.sum() > 0:
        mu = model.mu
        lo = np.minimum(xp, yp)
        top = np.maximum(xp, yp)
        x_larger = xp > yp
        active = np.nonzero(nb > 0)[0]
        r = 0
        while active.size:
            z, is_atom = c.mu_sampler.sample(rng, active.size)
            u = rng.random(active.size) * top[active]
            U = x1[active] - y1[active]
            code = _classify(mu, z, is_atom, u, lo[active], U)
            only = np.where(x_larger[active], X_ONLY, Y_ONLY)
            code = np.where(code < 0, only, code)
            dx = np.where(code == Y_ONLY, 0.0, z)
            dy = np.select([code == COALESCE, code == REFLECT, code == X_ONLY],
                           [z + U, z - U, 0.0], default=z)
            # coalesced pairs only ever see common moves
            jn = joined[active]
            dy = np.where(jn, dx, dy)
            bad = (code == REFLECT) & (y1[active] + dy < 0)
            if np.any(bad):
                code = np.where(bad, COMMON, code)
                dy = np.where(bad, z, dy)
            x1[active] += dx
            y1[active] += dy
            joined[active] |= (code == COALESCE)
            y1 = np.where(joined, x1, y1)
            if events is not None:
                events.add("branching", code)
            r += 1
            active = active[nb[active] > r]

    # synchronous environment jumps
    if c.nu_sampler is not None and ne.sum() > 0:
        total = int(ne.sum())
        zs, _ = c.nu_sampler.sample(rng, total)
        owner = np.repeat(np.arange(k), ne)
        logs = np.bincount(owner, weights=zs, minlength=k)
        f = np.exp(logs)
        x1 = x1 * f
        y1 = np.where(joined, x1, y1 * f)

    # basic coupling of catastrophes
    if c.cat_on:
        xc, yc = np.maximum(x1, 0.0), np.maximum(y1, 0.0)
        bound = np.maximum(c.rate_bound(xc), c.rate_bound(yc))
        counts = rng.poisson(np.maximum(bound, 0.0) * dt)
        fx, fy = np.ones(k), np.ones(k)
        active = np.nonzero(counts > 0)[0]
        r = 0
        while active.size:
            u = rng.random(active.size) * bound[active]
            z, _ = c.q_sampler.sample(rng, active.size)
            ax = u < np.asarray(model.r(xc[active] * fx[active]))
            ay = u < np.asarray(model.r(yc[active] * fy[active]))
            ay = np.where(joined[active], ax, ay)
            fx[active] = np.where(ax, fx[active] * z, fx[active])
            fy[active] = np.where(ay, fy[active] * z, fy[active])
            if events is not None:
                lab = np.where(ax & ay, 0, np.where(ax, 1, 2))[ax | ay]
                events.add("catastrophe", lab)
            r += 1
            active = active[counts[active] > r]
        x1 = np.where(x1 > 0, x1 * fx, x1)
        y1 = np.where(joined, x1, np.where(y1 > 0, y1 * fy, y1))

    x1 = np.maximum(x1, 0.0)
    y1 = np.where(joined, x1, np.maximum(y1, 0.0))
    xo[light], yo[light], met[light] = x1, y1, joined
    return xo, yo, met


def coupled_step(model: ModelSpec, x: float, y: float, dt: float, rng: np.random.Generator,
                 cfg: CouplingConfig) -> tuple[float, float]:
    """Advance an uncoupled pair by one step.

    Raises
    ------
    DomainError
        If ``x == y`` (already coalesced pairs evolve as a single copy).
    """
    if x == y:
        raise DomainError("coupled_step needs x != y; coalesced pairs evolve as one copy")
    if x < 0 or y < 0:
        raise DomainError("states must be nonnegative")
    c = _constants(model, cfg)
    tol = cfg.tol_for(x, y)
    xn, yn, met = _coupled_step(model, c, np.array([float(x)]), np.array([float(y)]), dt, rng, cfg)
    xn, yn = float(xn[0]), float(yn[0])
    if met[0] or abs(xn - yn) < tol:
        yn = xn
    if not (math.isfinite(xn) and max(xn, yn) <= cfg.overflow_guard):
        raise InstabilityError("state exceeded the overflow guard")
    return xn, yn


def _run_pairs(model, c, x0, y0, n, cfg: CouplingConfig, rng, record_idx, events=None):
    """Simulate ``n`` pairs from ``(x0, y0)``; records states and meeting times."""
    times = cfg.times
    tol = cfg.tol_for(x0, y0)
    x = np.full(n, float(x0))
    y = np.full(n, float(y0))
    T = np.full(n, math.inf)
    if x0 == y0:
        T[:] = 0.0
    bad = np.zeros(n, dtype=bool)
    recx = np.empty((len(record_idx), n))
    recy = np.empty((len(record_idx), n))
    rpos = 0
    if record_idx[0] == 0:
        recx[0], recy[0] = x, y
        rpos = 1
    from .simulate import _step_array
    for k in range(1, len(times)):
        dt = times[k] - times[k - 1]
        if events is not None:
            events.step = k
        live = ~bad
        coupled = np.nonzero(live & np.isfinite(T))[0]
        free = np.nonzero(live & ~np.isfinite(T))[0]
        if free.size:
            xn, yn, met = _coupled_step(model, c, x[free], y[free], dt, rng, cfg, events)
            met = met | (np.abs(xn - yn) < tol)
            yn = np.where(met, xn, yn)
            x[free], y[free] = xn, yn
            T[free[met]] = times[k]
        if coupled.size:
            xn = _step_array(model, c, x[coupled], dt, rng, cfg)
            x[coupled] = xn
            y[coupled] = xn
        over = live & (~np.isfinite(x) | ~np.isfinite(y) | (np.maximum(x, y) > cfg.overflow_guard))
        if np.any(over):
            bad |= over
            x[over] = np.nan
            y[over] = np.nan
        if rpos < len(record_idx) and record_idx[rpos] == k:
            recx[rpos], recy[rpos] = x, y
            rpos += 1
    return recx, recy, T, bad


def simulate_coupled(model: ModelSpec, x0: float, y0: float, cfg: CouplingConfig,
                     event_log: bool = False) -> CoupledPath:
    """Simulate one coupled path until ``t_end``."""
    if x0 < 0 or y0 < 0:
        raise DomainError("initial states must be nonnegative")
    c = _constants(model, cfg)
    rng = block_rng(cfg.seed, 0)
    grid = cfg.times
    events = _Events() if event_log else None
    recx, recy, T, bad = _run_pairs(model, c, x0, y0, 1, cfg, rng, np.arange(len(grid)), events)
    if bad[0]:
        raise InstabilityError("coupled path exceeded the overflow guard")
    log = None
    if events is not None:
        log = [(s, kind, (EVENT_NAMES if kind == "branching" else CAT_NAMES)[lab])
               for s, kind, lab in events.items]
    return CoupledPath(grid, recx[:, 0], recy[:, 0], float(T[0]), log)


def simulate_pairs(model: ModelSpec, x0: float, y0: float, n: int, cfg: CouplingConfig,
                   record_times=None):
    """Ensemble of coupled pairs.

    Returns
    -------
    times : ndarray
    xs, ys : ndarray, shape (len(times), n)
    T : ndarray of meeting times (``inf`` if not met)
    excluded : ndarray of bool
    """
    if n < 1:
        raise DomainError("n must be positive")
    if x0 < 0 or y0 < 0:
        raise DomainError("initial states must be nonnegative")
    grid = cfg.times
    if record_times is None:
        record_idx = np.arange(len(grid))
    else:
        record_idx = np.unique([int(np.argmin(np.abs(grid - t))) for t in record_times])
    c = _constants(model, cfg)

    def task(block, size):
        return _run_pairs(model, c, x0, y0, size, cfg, block_rng(cfg.seed, block), record_idx)

    parts = run_blocks(task, n, cfg)
    xs = np.concatenate([p[0] for p in parts], axis=1)
    ys = np.concatenate([p[1] for p in parts], axis=1)
    T = np.concatenate([p[2] for p in parts])
    bad = np.concatenate([p[3] for p in parts])
    return grid[record_idx], xs, ys, T, bad


def coalescence_stats(model: ModelSpec, pairs, n: int, cfg: CouplingConfig) -> list[dict]:
    """Empirical law of the meeting time for each starting pair.

    Each row holds ``x0``, ``y0``, the grid ``times``, ``p_coupled``
    (``P(T <= t)`` on the grid), ``mean_T`` and ``median_T`` among pairs that
    met, and ``frac_uncoupled`` at ``t_end``.
    """
    rows = []
    grid = cfg.times
    for x0, y0 in pairs:
        _, _, _, T, bad = simulate_pairs(model, x0, y0, n, cfg, record_times=[cfg.t_end])
        T = T[~bad]
        met = np.isfinite(T)
        p = np.array([np.mean(T <= t) for t in grid]) if T.size else np.full(len(grid), np.nan)
        rows.append({
            "x0": float(x0), "y0": float(y0), "times": grid, "p_coupled": p,
            "mean_T": float(np.mean(T[met])) if met.any() else math.inf,
            "median_T": float(np.median(T[met])) if met.any() else math.inf,
            "frac_uncoupled": float(np.mean(~met)) if T.size else math.nan,
            "n_excluded": int(bad.sum()),
        })
    return rows


def check_stickiness(times, xs, ys, T) -> int:
    """Number of paths whose coordinates differ at some grid time after ``T``."""
    after = times[:, None] >= T[None, :]
    differ = (xs != ys) & after & ~(np.isnan(xs) & np.isnan(ys))
    return int(np.any(differ, axis=0).sum())
