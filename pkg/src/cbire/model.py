"""Model parameters and the analytic scalar functions built from them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import AdmissibilityError, NumericalError
from .measures import (
    CatastropheLaw,
    Interval,
    JumpMeasure,
    measure_from_config,
)
from .quadrature import DEFAULT_QUAD, QuadratureConfig

_FORMS = ("constant", "affine", "polynomial", "power", "piecewise_linear")


@dataclass(frozen=True)
class ScalarFunction:
    """A named parametric function of the state.

    Forms
    -----
    constant : ``value``
    affine : ``a0 + a1 * x``
    polynomial : ``sum coeffs[k] * x**k``
    power : ``coef * x**exponent``
    piecewise_linear : linear interpolation through ``knots``/``values``,
        flat beyond the end knots
    """

    form: str
    params: tuple = ()

    def __post_init__(self):
        if self.form not in _FORMS:
            raise AdmissibilityError(f"unknown function form {self.form!r}")

    @classmethod
    def from_config(cls, cfg: dict) -> "ScalarFunction":
        form = cfg["form"]
        if form == "constant":
            params = (float(cfg["value"]),)
        elif form == "affine":
            params = (float(cfg.get("a0", 0.0)), float(cfg.get("a1", 0.0)))
        elif form == "polynomial":
            params = tuple(float(c) for c in cfg["coeffs"])
        elif form == "power":
            params = (float(cfg["coef"]), float(cfg["exponent"]))
        elif form == "piecewise_linear":
            knots = tuple(float(k) for k in cfg["knots"])
            values = tuple(float(v) for v in cfg["values"])
            if len(knots) != len(values) or len(knots) < 2 or list(knots) != sorted(knots):
                raise AdmissibilityError("piecewise_linear needs >= 2 sorted knots with matching values")
            params = (knots, values)
        else:
            raise AdmissibilityError(f"unknown function form {form!r}")
        return cls(form, params)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.form == "constant":
            out = np.full(x.shape, p[0])
        elif self.form == "affine":
            out = p[0] + p[1] * x
        elif self.form == "polynomial":
            out = np.polynomial.polynomial.polyval(x, np.asarray(p))
        elif self.form == "power":
            out = p[0] * np.power(np.maximum(x, 0.0), p[1])
        else:
            out = np.interp(x, p[0], p[1])
        return out if out.ndim else float(out)

    def to_config(self) -> dict:
        p = self.params
        if self.form == "constant":
            return {"form": "constant", "value": p[0]}
        if self.form == "affine":
            return {"form": "affine", "a0": p[0], "a1": p[1]}
        if self.form == "polynomial":
            return {"form": "polynomial", "coeffs": list(p)}
        if self.form == "power":
            return {"form": "power", "coef": p[0], "exponent": p[1]}
        return {"form": "piecewise_linear", "knots": list(p[0]), "values": list(p[1])}


ZERO_FUNCTION = ScalarFunction("constant", (0.0,))


def _em1p(t):
    """``exp(-t) - 1 + t`` without cancellation for small ``t``."""
    t = np.asarray(t, dtype=float)
    small = np.abs(t) < 1e-2
    ts = np.where(small, t, 0.0)
    series = ts**2 * (0.5 - ts / 6 * (1 - ts / 4 * (1 - ts / 5 * (1 - ts / 6 * (1 - ts / 7)))))
    return np.where(small, series, np.expm1(-t) + t)


def env_power_integrand(z, theta: float):
    """``exp(theta z) - 1 - theta (exp(z) - 1)``, stable near zero."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-4
    zs = np.where(small, z, 0.0)
    series = theta * (theta - 1) / 2 * zs**2 + theta * (theta**2 - 1) / 6 * zs**3
    return np.where(small, series, np.expm1(theta * z) - theta * np.expm1(z))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Full parameter set of the branching process in a random environment.

    Attributes
    ----------
    alpha : float
        Immigration drift, ``alpha >= 0``.
    b : float
        Linear branching drift.
    sigma : float
        Branching diffusion coefficient; the noise is ``sigma * sqrt(x) dW``.
    mu : JumpMeasure
        Branching jump measure on ``(0, inf)``.
    beta0, beta1 : float
        Drift and Brownian coefficient of the environment.
    nu : JumpMeasure
        Environment jump measure; a jump ``z`` multiplies the state by ``e^z``.
    r : ScalarFunction
        Catastrophe rate.
    k0 : float
        Declared Lipschitz constant of ``r``.
    r_inf : float
        Declared infimum of ``r`` over ``[0, inf)``.
    q : CatastropheLaw
        Law of the multiplicative catastrophe factor.
    g : ScalarFunction
        Competition mechanism, nondecreasing with ``g(0) = 0``.
    """

    alpha: float
    b: float
    sigma: float
    mu: JumpMeasure
    beta0: float
    beta1: float
    nu: JumpMeasure
    r: ScalarFunction
    k0: float
    r_inf: float
    q: CatastropheLaw
    g: ScalarFunction
    name: str = "model"
    quad: QuadratureConfig = field(default=DEFAULT_QUAD)

    def __post_init__(self):
        for attr in ("alpha", "b", "sigma", "beta0", "beta1", "k0", "r_inf"):
            v = getattr(self, attr)
            if not math.isfinite(v):
                raise AdmissibilityError(f"{attr} must be finite")
        if self.alpha < 0 or self.sigma < 0 or self.beta1 < 0 or self.k0 < 0 or self.r_inf < 0:
            raise AdmissibilityError("alpha, sigma, beta1, lipschitz and inf must be nonnegative")

    # derived constants ------------------------------------------------------

    def gamma(self, x):
        """Drift ``alpha - b x - g(x)``."""
        return self.alpha - self.b * np.asarray(x, dtype=float) - self.g(x)

    @cached_property
    def mu_z2_below1(self) -> float:
        """``int_(0,1] z^2 mu(dz)``."""
        return self.mu.integrate(lambda z: z * z, Interval(0.0, 1.0), quad=self.quad)

    @cached_property
    def mu_z_above1(self) -> float:
        """``int_(1,inf) z mu(dz)``."""
        return self.mu.integrate(lambda z: z, Interval(1.0, math.inf, False, False), quad=self.quad)

    @cached_property
    def nu_sq_below1(self) -> float:
        """``int_(-inf,1] (e^z - 1)^2 nu(dz)``."""
        return self.nu.integrate(lambda z: np.expm1(z) ** 2, Interval(-math.inf, 1.0, False, True),
                                 quad=self.quad)

    @cached_property
    def nu_sq_negative(self) -> float:
        """``int_(-inf,0) (e^z - 1)^2 nu(dz)``."""
        return self.nu.integrate(lambda z: np.expm1(z) ** 2, Interval(-math.inf, 0.0, False, False),
                                 quad=self.quad)

    @cached_property
    def nu_sq_01(self) -> float:
        """``int_(0,1] (e^z - 1)^2 nu(dz)``."""
        return self.nu.integrate(lambda z: np.expm1(z) ** 2, Interval(0.0, 1.0), quad=self.quad)

    @cached_property
    def nu_exp_above1(self) -> float:
        """``int_(1,inf) (e^z - 1) nu(dz)``."""
        return self.nu.integrate(lambda z: np.expm1(z), Interval(1.0, math.inf, False, False),
                                 growth=1.0, quad=self.quad)

    def r_sup(self, hi: float, n: int = 2049) -> float:
        """Grid supremum of ``r`` over ``[0, hi]``."""
        return float(np.max(self.r(np.linspace(0.0, hi, n))))

    def validate(self, x_max: float = 1e4, n: int = 2048, seed: int = 0) -> None:
        """Spot-check the structural assumptions on ``g`` and ``r``.

        Raises
        ------
        AdmissibilityError
        """
        grid = np.concatenate([[0.0], np.geomspace(1e-6, x_max, n)])
        gv = np.asarray(self.g(grid))
        rv = np.asarray(self.r(grid))
        if not (np.all(np.isfinite(gv)) and np.all(np.isfinite(rv))):
            raise AdmissibilityError("g or r is not finite on the verification grid")
        if abs(float(self.g(0.0))) > 1e-14:
            raise AdmissibilityError("g(0) must vanish")
        if np.any(np.diff(gv) < -1e-12 * (1 + np.abs(gv[1:]))):
            raise AdmissibilityError("g must be nondecreasing")
        if np.any(rv < 0):
            raise AdmissibilityError("r must be nonnegative")
        if self.r_inf > rv.min() + 1e-12:
            raise AdmissibilityError(f"declared inf of r ({self.r_inf}) exceeds its grid minimum ({rv.min()})")
        rng = np.random.default_rng(seed)
        xs = rng.uniform(0, 100, 512)
        ys = rng.uniform(0, 100, 512)
        diff = np.abs(np.asarray(self.r(xs)) - np.asarray(self.r(ys)))
        if np.any(diff > self.k0 * np.abs(xs - ys) * (1 + 1e-9) + 1e-12):
            raise AdmissibilityError("r violates its declared Lipschitz constant")

    # analytic functions -----------------------------------------------------

    def phi(self, lam: float) -> float:
        """Branching mechanism ``b l + sigma^2 l^2 / 2 + int (e^{-lz} - 1 + lz) mu(dz)``."""
        lam = float(lam)
        if lam < 0:
            raise ValueError("phi needs lambda >= 0")
        jump = 0.0
        if not self.mu.is_zero and lam > 0:
            jump = self.mu.integrate(lambda z: _em1p(lam * z), Interval(0.0, math.inf),
                                     quad=self.quad)
        return self.b * lam + 0.5 * self.sigma**2 * lam**2 + jump

    def phi_tilde(self, lam: float) -> float:
        """``phi(l) + (r_inf int (1-z) q(dz) - beta0) l``."""
        return self.phi(lam) + (self.r_inf * self.q.one_minus_mean - self.beta0) * float(lam)

    def H(self, x: float, x0: float = 1.0) -> float:
        """Negative-jump impact ``int_0^{x0/x} (1 - zx/x0)^3 (nu(d ln z) + r(x) q(dz))``."""
        x = float(x)
        if not x > 0:
            raise ValueError("H needs x > 0")
        t = x0 / x
        val = 0.0
        if not self.nu.is_zero:
            val += self.nu.integrate(lambda u: (-np.expm1(u + math.log(x / x0))) ** 3,
                                     Interval(-math.inf, math.log(t), False, False), quad=self.quad)
        rx = float(self.r(x))
        if rx > 0:
            val += rx * self.q.integrate(lambda z: np.clip(1.0 - z / t, 0.0, None) ** 3,
                                         Interval(0.0, t, True, True), quad=self.quad)
        return val

    def env_energy(self, lam0: float, l0: float) -> float:
        """Environment fluctuation term ``E(lambda0, l0)``."""
        return (self.beta1**2 + self.nu_sq_negative
                + math.exp(-lam0 * (math.e - 1) * l0) * self.nu_sq_01)

    def env_criterion_term(self, theta: float) -> float:
        """``beta0 - b + (theta-1) beta1^2 / 2 + int [e^{z theta} - 1 - theta (e^z - 1)] nu(dz)``."""
        jump = 0.0
        if not self.nu.is_zero:
            jump = self.nu.integrate(lambda z: env_power_integrand(z, theta), growth=1.0,
                                     quad=self.quad)
        return self.beta0 - self.b + (theta - 1) * self.beta1**2 / 2 + jump

    def to_config(self) -> dict:
        return dict(self._config) if hasattr(self, "_config") else {}


@dataclass(frozen=True)
class CriterionReport:
    """Outcome of the large-state ergodicity criterion.

    ``limsup_term`` is a grid estimate (tail maximum), not a proof.
    """

    theta_v: float
    limsup_term: float
    env_term: float
    total: float
    holds: bool
    grid: np.ndarray
    tail_profile: np.ndarray
    note: str = "limsup_term is a grid estimate over the tail quarter of the grid"

    def to_dict(self) -> dict:
        return {
            "theta_v": self.theta_v,
            "limsup_term": self.limsup_term,
            "env_term": self.env_term,
            "total": self.total,
            "holds": self.holds,
            "note": self.note,
        }


def default_criterion_grid(x_max: float = 1e4, n: int = 512) -> np.ndarray:
    return np.geomspace(1e-2, x_max, n)


def ergodicity_criterion(model: ModelSpec, theta_v: float, grid=None) -> CriterionReport:
    """Evaluate the large-state drift criterion for ``V = (1+x)^theta_v``.

    The limsup of ``-g(x)/x + r(x) int (z^theta - 1) q(dz)`` is replaced by
    the maximum over the last quarter of ``grid``.
    """
    if not 0 < theta_v < 1:
        raise ValueError("theta_v must lie in (0, 1)")
    grid = default_criterion_grid() if grid is None else np.asarray(grid, dtype=float)
    if grid.min() <= 0:
        raise ValueError("criterion grid must be positive")
    gv = np.asarray(model.g(grid), dtype=float)
    rv = np.asarray(model.r(grid), dtype=float)
    if not (np.all(np.isfinite(gv)) and np.all(np.isfinite(rv))):
        raise AdmissibilityError("g or r is not finite on the criterion grid")
    profile = -gv / grid + rv * model.q.power_moment(theta_v)
    tail = profile[-max(1, len(grid) // 4):]
    limsup = float(np.max(tail))
    env = float(model.env_criterion_term(theta_v))
    total = limsup + env
    if not math.isfinite(env):
        raise NumericalError("environment criterion term is not finite")
    return CriterionReport(theta_v, limsup, env, total, bool(total < 0), grid, profile)


# config ----------------------------------------------------------------------

def _q_from_config(cfg: dict | None) -> CatastropheLaw:
    if cfg is None:
        cfg = {"atoms": [[1.0, 1.0]]}
    if "family" in cfg:
        return measure_from_config(cfg, "catastrophe")
    terms = []
    if "atoms" in cfg:
        terms.append({"family": "atoms", "atoms": cfg["atoms"]})
    if "density" in cfg:
        terms.append(cfg["density"])
    if not terms:
        raise AdmissibilityError("q needs atoms or a density")
    return measure_from_config({"family": "sum", "terms": terms}, "catastrophe")


def model_from_config(cfg: dict, quad: QuadratureConfig = DEFAULT_QUAD) -> ModelSpec:
    """Build a :class:`ModelSpec` from the ``model`` section of a run config."""
    r_cfg = dict(cfg.get("r") or {"form": "constant", "value": 0.0})
    k0 = float(r_cfg.pop("lipschitz", 0.0))
    r_inf = float(r_cfg.pop("inf", 0.0))
    model = ModelSpec(
        alpha=float(cfg["alpha"]),
        b=float(cfg["b"]),
        sigma=float(cfg.get("sigma", 0.0)),
        mu=measure_from_config(cfg.get("mu"), "branching"),
        beta0=float(cfg.get("beta0", 0.0)),
        beta1=float(cfg.get("beta1", 0.0)),
        nu=measure_from_config(cfg.get("nu"), "environment"),
        r=ScalarFunction.from_config(r_cfg),
        k0=k0,
        r_inf=r_inf,
        q=_q_from_config(cfg.get("q")),
        g=ScalarFunction.from_config(cfg.get("g") or {"form": "constant", "value": 0.0}),
        name=str(cfg.get("name", "model")),
        quad=quad,
    )
    object.__setattr__(model, "_config", cfg)
    model.validate()
    return model
