"""Drift certificate for the coupled process.

The pipeline derives every constant of the control function
``F(x, y) = (V(x) + V(y)) 1_{x != y} + eps * phi(x v y) psi(|x - y| ^ l0) 1_{x != y}``
and then checks ``L~F <= -lambda F`` on an off-diagonal grid, where ``L~`` is
the coupling generator.  The grid check is the falsifiable part: every
constant is derived by the analytic recipe, but the certificate is only
marked verified when the evaluated generator actually satisfies the drift
inequality at every grid point.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConditionError, NumericalError
from .generator import (LyapunovReport, TestFunction2D, apply_L_coupled, lyapunov_check,
                        lyapunov_ratio)
from .measures import Interval, _integral_diverges, overlap_mass
from .model import ModelSpec, _em1p

LAMBDA_MIN = 1e-6
LAMBDA_MAX = 1e8
SEARCH_RTOL = 1e-9


# control functions -------------------------------------------------------------------


@dataclass(frozen=True)
class ControlFunctions:
    """The two shape functions of the distance-like part of ``F``.

    ``psi(u) = 2 - exp(-lambda0 u)`` rewards separation, and
    ``phi(x) = theta + (1 - x/x0)^3`` on ``[0, x0)`` (``theta`` beyond) pushes
    pairs away from the boundary.
    """

    lambda0: float
    x0: float
    theta: float
    l0: float
    theta_v: float
    eps: float

    def psi(self, u):
        return 2.0 - np.exp(-self.lambda0 * np.asarray(u, dtype=float))

    def dpsi(self, u):
        return self.lambda0 * np.exp(-self.lambda0 * np.asarray(u, dtype=float))

    def d2psi(self, u):
        return -self.lambda0**2 * np.exp(-self.lambda0 * np.asarray(u, dtype=float))

    def _gap(self, x):
        return np.clip(1.0 - np.asarray(x, dtype=float) / self.x0, 0.0, None)

    def phi(self, x):
        return self.theta + self._gap(x) ** 3

    def dphi(self, x):
        return -3.0 / self.x0 * self._gap(x) ** 2

    def d2phi(self, x):
        return 6.0 / self.x0**2 * self._gap(x)

    def phi_rem(self, m, z):
        """``phi(m+z) - phi(m) - phi'(m) z`` for ``z >= 0`` without cancellation."""
        a = float(self._gap(m))
        d = np.asarray(z, dtype=float) / self.x0
        if a == 0.0:
            return np.zeros(d.shape)
        return np.where(d <= a, d * d * (3 * a - d), a * a * (3 * d - a))

    def V(self, x):
        return (1.0 + np.asarray(x, dtype=float)) ** self.theta_v

    def f(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        u = np.abs(x - y)
        val = self.phi(np.maximum(x, y)) * self.psi(np.minimum(u, self.l0))
        return np.where(u > 0, val, 0.0)

    def F(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        base = np.where(x != y, self.V(x) + self.V(y), 0.0)
        return base + self.eps * self.f(x, y)

    def to_dict(self) -> dict:
        return {"lambda0": self.lambda0, "x0": self.x0, "theta": self.theta, "l0": self.l0,
                "theta_v": self.theta_v, "eps": self.eps}


class ControlFunction2D(TestFunction2D):
    """``f(x, y) = phi(x v y) psi(|x-y| ^ l0)`` as a coupling-generator test function."""

    degree = 0.0

    def __init__(self, cf: ControlFunctions):
        self.cf = cf

    def value(self, x, y):
        return self.cf.f(x, y)

    def _parts(self, x, y):
        cf = self.cf
        hi, u = max(x, y), abs(x - y)
        capped = u >= cf.l0
        uu = min(u, cf.l0)
        p, p1, p2 = float(cf.phi(hi)), float(cf.dphi(hi)), float(cf.d2phi(hi))
        s = float(cf.psi(uu))
        s1 = 0.0 if capped else float(cf.dpsi(uu))
        s2 = 0.0 if capped else float(cf.d2psi(uu))
        return p, p1, p2, s, s1, s2

    def grad(self, x, y):
        p, p1, _, s, s1, _ = self._parts(x, y)
        lead, lag = p1 * s + p * s1, -p * s1
        return (lead, lag) if x > y else (lag, lead)

    def hess(self, x, y):
        p, p1, p2, s, s1, s2 = self._parts(x, y)
        lead = p2 * s + 2 * p1 * s1 + p * s2
        lag = p * s2
        cross = -p1 * s1 - p * s2
        return (lead, lag, cross) if x > y else (lag, lead, cross)

    def rem_common(self, x, y, z):
        # a common shift keeps the separation, so only phi contributes
        return float(self.cf.psi(min(abs(x - y), self.cf.l0))) * self.cf.phi_rem(max(x, y), z)

    def _lead_rem(self, x, y, z):
        # larger coordinate moves up by z >= 0, written without cancellation
        cf = self.cf
        hi, u = max(x, y), abs(x - y)
        z = np.asarray(z, dtype=float)
        if u >= cf.l0:
            return float(cf.psi(cf.l0)) * cf.phi_rem(hi, z)
        lam = cf.lambda0
        zc = np.minimum(z, cf.l0 - u)
        e = math.exp(-lam * u)
        step = -e * np.expm1(-lam * zc)
        prem = np.where(z <= cf.l0 - u, -e * _em1p(lam * z), step - lam * e * z)
        return (cf.phi_rem(hi, z) * (float(cf.psi(u)) + step)
                + float(cf.dphi(hi)) * z * step + float(cf.phi(hi)) * prem)

    def rem_x(self, x, y, z):
        return self._lead_rem(x, y, z) if x > y else super().rem_x(x, y, z)

    def rem_y(self, x, y, z):
        return self._lead_rem(x, y, z) if y > x else super().rem_y(x, y, z)

    def breakpoints_common(self, x, y):
        pts = [self.cf.x0 - max(x, y), self.cf.l0 - abs(x - y)]
        return tuple(p for p in pts if p > 0)

    def breakpoints_scale(self, x, y):
        pts = []
        u, hi = abs(x - y), max(x, y)
        if u > 0:
            pts.append(math.log(self.cf.l0 / u))
        if hi > 0:
            pts.append(math.log(self.cf.x0 / hi))
        return tuple(pts)


# condition checks -------------------------------------------------------------------------


def check_immigration(model: ModelSpec) -> None:
    """Require a strictly positive immigration drift ``alpha = gamma(0)``."""
    if not model.alpha > 0:
        raise ConditionError("immigration", "the drift at zero (alpha) must be strictly positive")


def check_nontriviality(model: ModelSpec, c0: float | None = None, n_grid: int = 33):
    """Check that the branching noise can separate and merge nearby pairs.

    Returns
    -------
    (c0, delta) : tuple of float
        ``delta = 0`` when the Brownian branching noise is present; otherwise
        ``delta`` is the grid minimum of the overlap mass over ``0 < |x| <= c0``.

    Raises
    ------
    ConditionError
        Neither a diffusion part nor a divergent ``int_0^1 z mu(dz)`` with
        positive overlap mass.
    """
    if model.sigma > 0:
        return (1.0 if c0 is None else float(c0)), 0.0
    c0 = 1.0 if c0 is None else float(c0)
    mu = model.mu
    if not mu.has_density:
        raise ConditionError("nontriviality", "sigma = 0 and the branching measure has no density")

    def slab(a, b):
        return mu.integrate(lambda z: z, Interval(a, b), quad=model.quad)

    if not _integral_diverges(slab):
        raise ConditionError("nontriviality",
                             "sigma = 0 and int_0^1 z mu(dz) is finite")
    xs = np.linspace(0.0, c0, n_grid)[1:]
    masses = [overlap_mass(mu, s * x, quad=model.quad) for x in xs for s in (1.0, -1.0)]
    delta = float(min(masses))
    if not delta > 0:
        raise ConditionError("nontriviality", f"overlap mass vanishes on |x| <= {c0}")
    return c0, delta


def check_negative_jump_tail(model: ModelSpec, theta_v: float,
                             xs=(1e2, 1e3, 1e4, 1e5)) -> list[float]:
    """Sample ``H(x)/V(x)`` on a log grid and require decay towards zero.

    Raises
    ------
    ConditionError
        When the ratio does not decrease along the grid.
    """
    ratios = [model.H(x) / (1.0 + x) ** theta_v for x in xs]
    if ratios[-1] == 0.0:
        return ratios
    if any(b > a * (1 + 1e-9) for a, b in zip(ratios, ratios[1:])) or ratios[-1] > 0.5 * ratios[0]:
        raise ConditionError("negative_jump_tail", f"H(x)/V(x) does not decay: {ratios}")
    return ratios


# constants --------------------------------------------------------------------------------


def _bisect(pred, lo: float, hi: float, rtol: float = SEARCH_RTOL) -> float:
    """Smallest point of ``(lo, hi]`` where ``pred`` flips to true, returned on the true side."""
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if pred(mid):
            hi = mid
        else:
            lo = mid
    return hi


def find_lambda3(model: ModelSpec) -> float:
    """Smallest ``lambda`` (up to bisection tolerance) with ``Phi~(lambda) > 0``.

    Raises
    ------
    ConditionError
        When no positive value is found below ``1e8``.
    """
    pos = lambda lam: model.phi_tilde(lam) > 0  # noqa: E731
    lam = LAMBDA_MIN
    if pos(lam):
        return lam
    while not pos(2 * lam):
        lam *= 2
        if lam > LAMBDA_MAX:
            raise ConditionError("nontriviality", "Phi~ stays nonpositive up to 1e8")
    out = _bisect(pos, lam, 2 * lam)
    if not pos(out):
        raise NumericalError("bisection for lambda3 lost the sign change")
    return out


@dataclass(frozen=True)
class Regions:
    x0: float
    K: float
    K0: float
    M: float
    S0_bound: float
    l0: float
    checks: tuple = ()


def default_K(model: ModelSpec, x0: float) -> float:
    return 1.5 * model.alpha / x0


def build_regions(model: ModelSpec, lyap: LyapunovReport, K: float | None, x0: float,
                  x_max: float = 1e6, n: int = 600) -> Regions:
    """Large-state threshold ``M``, the level-set radius and the distance cap ``l0``.

    ``K0 = min(K, 3 alpha / (2 x0))``: the small-state bound can only reach a
    fraction of ``-3 alpha / x0``.

    Raises
    ------
    ConditionError
        When ``H(x)/V(x)`` stays too large up to ``x_max``.
    """
    th = lyap.theta_v
    lam1, lam2 = lyap.lambda1, lyap.lambda2
    K = default_K(model, x0) if K is None else float(K)
    K0 = min(K, default_K(model, x0))
    coef = 9.0 * lam2 / (K0 * lam1)
    V = lambda x: (1.0 + x) ** th  # noqa: E731

    def ok(x):
        return V(x) >= 12.0 * (1 - 1e-12) and 1.0 - coef * model.H(x) / V(x) >= 0.25

    start = 12.0 ** (1.0 / th) - 1.0
    grid = np.geomspace(start, x_max, n)
    good = np.array([ok(x) for x in grid])
    if not good[-1]:
        raise ConditionError("negative_jump_tail",
                             f"1 - c H(x)/V(x) < 1/4 still at x = {x_max:g}")
    bad = np.flatnonzero(~good)
    M = float(grid[bad[-1] + 1]) if bad.size else float(start)
    M = max(M, 1.0)
    for pt in (M, 2 * M):
        if not ok(pt):
            raise ConditionError("negative_jump_tail", f"large-state inequalities fail at {pt:g}")
    # level-set radius: lambda1 (V(x*) + V(0)) = 6 lambda2
    target = 6.0 * lam2 / lam1 - 1.0
    S0 = 0.0 if target < 1.0 else float(target ** (1.0 / th) - 1.0)
    checks = (
        _check("V(M) >= 12", V(M), 12.0),
        _check("1 - 9 l2/(K0 l1) H(M)/V(M) >= 1/4", 1.0 - coef * model.H(M) / V(M), 0.25),
        _check("1 - 9 l2/(K0 l1) H(2M)/V(2M) >= 1/4", 1.0 - coef * model.H(2 * M) / V(2 * M), 0.25),
    )
    return Regions(x0, K, K0, M, S0, S0 + M, checks)


def find_lambda0(model: ModelSpec, l0: float, k0: float, x0: float, lambda3: float) -> float:
    """Smallest ``lambda0 > lambda3`` meeting both separation constraints.

    The constraints are ``x0 l E(l, l0) / 4 + Phi~(l)/l >= 4 k0 l0`` and
    ``Phi~(l)/l >= 2 k0 l0``.

    Raises
    ------
    ConditionError
        When no admissible value is found below ``1e8``.
    """
    lo = lambda3 * (1 + SEARCH_RTOL)
    ok = lambda lam: lambda0_feasible(model, lam, l0, k0, x0)  # noqa: E731
    if ok(lo):
        return lo
    lam = lo
    while not ok(2 * lam):
        lam *= 2
        if lam > LAMBDA_MAX:
            raise ConditionError("nontriviality", "no lambda0 below 1e8 dominates k0 l0")
    return _bisect(ok, lam, 2 * lam)


def lambda0_constraints(model: ModelSpec, lam: float, l0: float, k0: float, x0: float):
    """Left and right sides of the two ``lambda0`` constraints."""
    pt = model.phi_tilde(lam) / lam
    first = 0.25 * x0 * lam * model.env_energy(lam, l0) + pt
    return (first, 4 * k0 * l0), (pt, 2 * k0 * l0)


def lambda0_feasible(model, lam, l0, k0, x0) -> bool:
    (a, b), (c, d) = lambda0_constraints(model, lam, l0, k0, x0)
    return a >= b and c >= d and model.phi_tilde(lam) > 0


def small_state_bound(model: ModelSpec, x0: float, r: float) -> float:
    """Upper bound on the boundary-push term for states below ``r x0``."""
    rq = model.r_sup(x0 / 2) * model.q.one_minus_mean
    return (abs(model.beta0 - model.b) * 6 * r
            + 6 * float(model.g(r * x0)) / x0
            - 3 * model.alpha / x0 * (1 - r) ** 2
            + 6 * r / x0 * (model.sigma**2 + model.mu_z2_below1)
            + 6 * r * r * (model.beta1**2 + model.nu_sq_below1)
            + 6 * r * (model.mu_z_above1 + model.nu_exp_above1 + rq))


def find_r_small(model: ModelSpec, x0: float) -> float:
    """Largest ``r`` in ``(0, 1/2]`` with ``small_state_bound <= -3 alpha / (2 x0)``.

    The bound is nondecreasing in ``r`` and tends to ``-3 alpha / x0``.
    """
    target = -1.5 * model.alpha / x0
    good = lambda r: small_state_bound(model, x0, r) <= target  # noqa: E731
    if good(0.5):
        return 0.5
    lo, hi = 0.0, 0.5
    while hi - lo > SEARCH_RTOL * hi:
        mid = 0.5 * (lo + hi)
        if good(mid):
            lo = mid
        else:
            hi = mid
    if not lo > 0:
        raise ConditionError("immigration", "small-state bound unreachable for any r > 0")
    return lo


def R_constant(model: ModelSpec, x0: float) -> float:
    """Coefficient bound for states in ``(r x0, x0]``."""
    return (abs(model.beta0 - model.b) + float(model.g(x0)) / x0
            + (model.sigma**2 + model.mu_z2_below1) / x0
            + model.beta1**2 + model.nu_sq_below1
            + model.mu_z_above1 + model.nu_exp_above1
            + model.r_sup(x0) * model.q.one_minus_mean)


def H_bar(model: ModelSpec, x0: float, hi: float, n: int = 128) -> float:
    """Grid supremum of ``H(x, x0)`` over ``x0 < x <= hi``."""
    hi = max(hi, x0 * 1.001)
    xs = np.geomspace(x0, hi, n + 1)[1:]
    return float(max(model.H(x, x0) for x in xs))


@dataclass(frozen=True)
class ThetaParts:
    """Inputs of the level ``theta`` of ``phi``."""

    H: float
    K: float
    R: float
    x0: float
    l0: float
    lambda0: float
    k0: float
    sigma: float
    delta: float
    r_small: float
    phi_tilde: float
    energy: float


def theta_branches(p: ThetaParts) -> dict[str, float]:
    """The five lower bounds on ``theta``.

    With ``k0 = 0`` the two separation branches use the unsimplified
    bracket ``Phi~/l + x0 l E / 4 - 2 k0 l0`` in place of the ``k0`` factor.
    """
    decay = math.exp(-p.lambda0 * p.l0)
    noise = p.sigma**2 * p.lambda0**2 * decay + p.delta
    out = {"floor": 4.0}
    out["near_large"] = _ratio(4 * (2 * p.H + p.K), p.x0 * noise)
    out["near_small"] = _ratio(4 * (6 * p.R + p.K), p.r_small * p.x0 * noise) + 2
    pt = p.phi_tilde / p.lambda0
    if p.k0 > 0:
        out["far_large"] = _ratio(2 * p.H + p.K, p.lambda0 * p.l0 * decay * p.x0 * p.k0)
        out["far_small"] = _ratio(6 * p.R + p.K, p.r_small**2 * p.x0 * p.k0 * p.l0 * p.lambda0 * decay)
    else:
        b2 = pt + 0.25 * p.x0 * p.lambda0 * p.energy
        b5 = pt + 0.25 * p.r_small * p.x0 * p.lambda0 * p.energy
        out["far_large"] = _ratio(2 * p.H + p.K, p.lambda0 * decay * p.x0 / 2 * b2)
        out["far_small"] = _ratio(6 * p.R + p.K, p.lambda0 * decay * p.r_small * p.x0 / 2 * b5)
    return out


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else math.inf


def choose_theta(p: ThetaParts) -> float:
    """``theta`` = the maximum of :func:`theta_branches`, verified by substitution."""
    br = theta_branches(p)
    theta = max(br.values())
    if not math.isfinite(theta):
        raise NumericalError("the separation noise term sigma^2 lambda0^2 e^{-lambda0 l0} + delta "
                             "vanishes in floating point")
    assert all(theta >= v for v in br.values())
    return theta


def rebalance_lyapunov(lyap: LyapunovReport, n: int = 400) -> LyapunovReport:
    """Trade ``lambda1`` against ``lambda2`` to minimise ``lambda2 / lambda1``.

    Any ``0 < l1 <= lambda1`` paired with ``l2 = max(1, max(LV + l1 V))`` is
    still a valid drift pair on the grid.  The ratio sets the size of the
    level set that the distance part must cover, so shrinking it keeps
    ``l0`` and ``theta`` moderate.
    """
    best = None
    for l1 in lyap.lambda1 * np.geomspace(1e-4, 1.0, n):
        l2 = float(max(1.0, np.max(lyap.LV + l1 * lyap.V)))
        if best is None or l2 / l1 < best[1] / best[0]:
            best = (float(l1), l2)
    l1, l2 = best
    margin = float(np.min(l2 - l1 * lyap.V - lyap.LV))
    return LyapunovReport(lyap.theta_v, l1, l2, lyap.grid, lyap.V, lyap.LV, margin, margin >= 0)


def _check(name, lhs, rhs, relation=">=") -> dict:
    lhs, rhs = float(lhs), float(rhs)
    holds = lhs >= rhs if relation == ">=" else (lhs <= rhs if relation == "<=" else lhs > rhs)
    return {"name": name, "lhs": lhs, "rhs": rhs, "relation": relation, "holds": bool(holds)}


# verification grid -------------------------------------------------------------------------


def verification_grid(l0: float, x0: float, n: int = 64, n_sliver: int = 32,
                      gaps=(1e-3, 1e-2, 1e-1)) -> np.ndarray:
    """Off-diagonal ``(x, y)`` points covering ``(0, 4 l0]^2``.

    ``n`` log-spaced ``x`` values times ``n`` ratios ``y/x`` in ``[0, 1)``,
    near-diagonal slivers at fixed gaps, and every point mirrored.
    """
    x_lo = min(1e-3, x0 / 100)
    xs = np.geomspace(x_lo, 4 * l0, n)
    s = np.arange(n) / n
    X, S = np.meshgrid(xs, s, indexing="ij")
    main = np.column_stack([X.ravel(), (X * S).ravel()])
    xl = np.geomspace(x_lo, 4 * l0, n_sliver)
    sl = np.concatenate([np.column_stack([xl + g, xl]) for g in gaps])
    pts = np.concatenate([main, sl])
    pts = np.concatenate([pts, pts[:, ::-1]])
    return pts[pts[:, 0] != pts[:, 1]]


# certificate -------------------------------------------------------------------------------


@dataclass
class DriftCertificate:
    """All constants of the drift certificate and the outcome of the grid check."""

    model_name: str
    theta_v: float
    lambda1: float
    lambda2: float
    c0: float
    delta: float
    k0: float
    x0: float
    M: float
    S0_bound: float
    l0: float
    lambda3: float
    lambda0: float
    r_small: float
    H_bar: float
    R: float
    K: float
    K0: float
    theta: float
    eps: float
    C3: float
    C4: float
    lam: float
    grid_margin: float
    slack_at_min: float
    verified: bool
    theta_branches: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    offending: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    grid: np.ndarray | None = field(default=None, repr=False)
    LF: np.ndarray | None = field(default=None, repr=False)
    Fvals: np.ndarray | None = field(default=None, repr=False)
    margins: np.ndarray | None = field(default=None, repr=False)

    @property
    def controls(self) -> ControlFunctions:
        return ControlFunctions(self.lambda0, self.x0, self.theta, self.l0, self.theta_v, self.eps)

    def to_dict(self) -> dict:
        keys = ["model_name", "theta_v", "lambda1", "lambda2", "c0", "delta", "k0", "x0", "M",
                "S0_bound", "l0", "lambda3", "lambda0", "r_small", "H_bar", "R", "K", "K0",
                "theta", "eps", "C3", "C4", "lam", "grid_margin", "slack_at_min", "verified",
                "theta_branches", "checks", "offending", "notes"]
        out = {k: getattr(self, k) for k in keys}
        out["n_grid"] = 0 if self.grid is None else int(len(self.grid))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DriftCertificate":
        """Rebuild the scalar part of a certificate written by :meth:`to_dict`."""
        names = [f.name for f in dataclasses.fields(cls)
                 if f.name not in ("grid", "LF", "Fvals", "margins")]
        return cls(**{k: d[k] for k in names if k in d})

    def margin_table(self) -> np.ndarray:
        """Columns ``x, y, F, LF, margin``."""
        return np.column_stack([self.grid, self.Fvals, self.LF, self.margins])


def eval_F(cert: DriftCertificate, x, y):
    """``F(x, y)`` for the certificate's control functions."""
    out = cert.controls.F(x, y)
    return out if np.ndim(out) else float(out)


def lemma_bound(model: ModelSpec, cert: DriftCertificate, x: float, y: float) -> float:
    """Termwise upper bound on ``L~f(x, y)`` for ``x > x0`` and ``0 < x - y <= l0``."""
    u = x - y
    if not (x > cert.x0 and 0 < u <= cert.l0):
        raise ValueError("bound needs x > x0 and 0 < x - y <= l0")
    lam0, th = cert.lambda0, cert.theta
    e = math.exp(-lam0 * u)
    mass = overlap_mass(model.mu, u, quad=model.quad) if model.mu.has_density else 0.0
    rx, ry = float(model.r(x)), float(model.r(y))
    bracket = (model.phi(lam0) / lam0 + (min(rx, ry) * model.q.one_minus_mean - model.beta0)
               + 0.5 * lam0 * u * model.env_energy(lam0, cert.l0) - 2 * cert.l0 * abs(rx - ry) / u)
    return (2 * model.H(x, cert.x0) - 0.5 * th * y * (model.sigma**2 * lam0**2 * e + mass)
            - th * u * lam0 * e * bracket)


def _slack(model: ModelSpec, F):
    tol = max(model.quad.abs_tol, model.quad.rel_tol)
    return 1e3 * tol * (1.0 + F)


def certify(model: ModelSpec, theta_v: float, *, K: float | None = None, c0: float | None = None,
            x0: float | None = None, grid2d=None, lyap: LyapunovReport | None = None,
            n_grid: int = 64, rebalance: bool = True, workers: int = 1) -> DriftCertificate:
    """Derive all certificate constants and check ``L~F <= -lambda F`` on a grid.

    Parameters
    ----------
    model : ModelSpec
    theta_v : float
        Exponent of ``V(x) = (1+x)^theta_v``.
    K : float, optional
        Target drift of the distance part on the inner region.
    c0, x0 : float, optional
        Overlap radius and small-state threshold; ``x0`` defaults to ``min(1, c0)``.
    grid2d : array of shape (n, 2), optional
        Verification points; the default covers ``(0, 4 l0]^2``.
    rebalance : bool
        Replace the fitted ``lambda1`` by the value minimising ``lambda2 / lambda1``.
    workers : int
        Threads for the grid evaluation; results do not depend on it.

    Raises
    ------
    ConditionError
        When a structural condition fails before the grid check.
    """
    check_immigration(model)
    lyap = lyapunov_check(model, theta_v) if lyap is None else lyap
    if not lyap.holds:
        raise ConditionError("lyapunov", f"no Lyapunov drift for V = (1+x)^{theta_v} "
                             f"(lambda1 = {lyap.lambda1:.6g})")
    if rebalance:
        lyap = rebalance_lyapunov(lyap)
    check_negative_jump_tail(model, theta_v)
    c0, delta = check_nontriviality(model, c0)
    x0 = min(1.0, c0) if x0 is None else float(x0)
    if not 0 < x0 <= min(1.0, c0):
        raise ValueError("x0 must lie in (0, min(1, c0)]")
    lam3 = find_lambda3(model)
    reg = build_regions(model, lyap, K, x0)
    k0, l0 = model.k0, reg.l0
    r_small = find_r_small(model, x0)
    Hb = H_bar(model, x0, max(reg.M, reg.S0_bound))
    R = R_constant(model, x0)

    def parts(lam0):
        return ThetaParts(Hb, reg.K, R, x0, l0, lam0, k0, model.sigma, delta, r_small,
                          model.phi_tilde(lam0), model.env_energy(lam0, l0))

    lam0_min = find_lambda0(model, l0, k0, x0, lam3)
    # lambda0 is free above its minimum; take the feasible value giving the smallest theta
    cands = lam0_min * np.geomspace(1.0, max(1e3, 1e3 / (lam0_min * l0)), 241)
    best = None
    for lam0 in cands:
        if not lambda0_feasible(model, lam0, l0, k0, x0):
            continue
        th = max(theta_branches(parts(lam0)).values())
        if best is None or th < best[1]:
            best = (float(lam0), th)
    if best is None:
        raise NumericalError("no feasible lambda0 on the scan")
    lam0 = best[0]
    p = parts(lam0)
    theta = choose_theta(p)
    branches = theta_branches(p)
    eps = 3.0 * lyap.lambda2 / reg.K0
    cf = ControlFunctions(lam0, x0, theta, l0, theta_v, eps)

    checks = [_check("Phi~(lambda3) > 0", model.phi_tilde(lam3), 0.0, ">")]
    (a, b), (c, d) = lambda0_constraints(model, lam0, l0, k0, x0)
    checks += [_check("x0 l0 E/4 + Phi~/lambda0 >= 4 k0 l0", a, b),
               _check("Phi~/lambda0 >= 2 k0 l0", c, d),
               _check("lambda0 > lambda3", lam0, lam3, ">")]
    checks += list(reg.checks)
    checks.append(_check("small-state bound <= -3 alpha/(2 x0)",
                         small_state_bound(model, x0, r_small), -1.5 * model.alpha / x0, "<="))
    checks += [_check(f"theta >= {k}", theta, v) for k, v in branches.items()]

    pts = verification_grid(l0, x0, n=n_grid) if grid2d is None else np.asarray(grid2d, float)
    LF, Fv, base = _evaluate_grid(model, cf, pts, workers)
    C4 = float(np.max(np.maximum(Fv / base, base / Fv)))
    C3 = float(np.min(-LF / base))
    lam = max(min(lyap.lambda1, C3) / C4, 0.0)
    margins = -lam * Fv - LF
    slack = _slack(model, Fv)
    ok = margins >= -slack
    i = int(np.argmin(margins))
    offending = [[float(pts[j, 0]), float(pts[j, 1]), float(margins[j])]
                 for j in np.flatnonzero(~ok)[:50]]
    notes = ["C3 and C4 are grid extrema, not analytic constants",
             "the V part of L~F uses the bound LV(x) + LV(y)"]
    if k0 == 0:
        notes.append("k0 = 0: separation branches of theta use the unsimplified bracket")
    return DriftCertificate(
        model.name, theta_v, lyap.lambda1, lyap.lambda2, c0, delta, k0, x0, reg.M, reg.S0_bound,
        l0, lam3, lam0, r_small, Hb, R, reg.K, reg.K0, theta, eps, C3, C4, lam,
        float(margins[i]), float(slack[i]), bool(lam > 0 and ok.all()), branches, checks,
        offending, notes, pts, LF, Fv, margins)


def _evaluate_grid(model: ModelSpec, cf: ControlFunctions, pts: np.ndarray, workers: int = 1):
    """``L~F`` upper bound, ``F`` and ``V(x) + V(y) + 1`` at each grid point."""
    f2 = ControlFunction2D(cf)
    coords = np.unique(pts.ravel())
    lv = lyapunov_ratio(model, cf.theta_v, coords) * cf.V(coords)
    LV = dict(zip(coords.tolist(), lv.tolist()))

    def one(pt):
        x, y = float(pt[0]), float(pt[1])
        return LV[x] + LV[y] + cf.eps * apply_L_coupled(model, f2, x, y)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            LF = np.array(list(ex.map(one, pts)))
    else:
        LF = np.array([one(pt) for pt in pts])
    if not np.all(np.isfinite(LF)):
        raise NumericalError("coupling generator is not finite on the verification grid")
    Fv = cf.F(pts[:, 0], pts[:, 1])
    base = cf.V(pts[:, 0]) + cf.V(pts[:, 1]) + 1.0
    return LF, Fv, base
