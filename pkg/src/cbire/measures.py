"""Jump measures: densities, atoms, restricted samplers and overlap objects.

Three measures drive the process.  The branching measure ``mu`` lives on
``(0, inf)``, the environment measure ``nu`` on the real line, and the
catastrophe law ``q`` is a probability measure on ``[0, 1]``.  Every measure
is a finite sum of parametric density pieces plus a finite list of atoms.
This keeps integrals, tails and samplers reproducible from config alone.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .errors import AdmissibilityError, DomainError, UnsupportedCouplingError
from .quadrature import DEFAULT_QUAD, QuadratureConfig, integrate_interval

_TINY = 1e-300
# power-law pieces overflow below this; their mass there is negligible
_POWER_FLOOR = 1e-80
_KINDS = ("exponential", "power_law_cutoff", "beta")


@dataclass(frozen=True)
class Interval:
    """An interval of the real line with configurable closedness.

    The default ``(lo, hi]`` matches the truncation regions used for jump
    sampling.
    """

    lo: float
    hi: float
    lo_closed: bool = False
    hi_closed: bool = True

    def contains(self, z):
        z = np.asarray(z, dtype=float)
        left = z >= self.lo if self.lo_closed else z > self.lo
        right = z <= self.hi if self.hi_closed else z < self.hi
        return left & right

    @property
    def is_empty(self) -> bool:
        if self.lo < self.hi:
            return False
        return not (self.lo == self.hi and self.lo_closed and self.hi_closed)

    def intersect(self, other: "Interval") -> "Interval":
        if self.lo > other.lo:
            lo, lc = self.lo, self.lo_closed
        elif self.lo < other.lo:
            lo, lc = other.lo, other.lo_closed
        else:
            lo, lc = self.lo, self.lo_closed and other.lo_closed
        if self.hi < other.hi:
            hi, hc = self.hi, self.hi_closed
        elif self.hi > other.hi:
            hi, hc = other.hi, other.hi_closed
        else:
            hi, hc = self.hi, self.hi_closed and other.hi_closed
        return Interval(lo, hi, lc, hc)


EVERYTHING = Interval(-math.inf, math.inf, True, True)


def region_union(*intervals: Interval) -> tuple[Interval, ...]:
    """A region is a tuple of disjoint intervals."""
    return tuple(iv for iv in intervals if not iv.is_empty)


def _as_region(region) -> tuple[Interval, ...]:
    if isinstance(region, Interval):
        return (region,)
    return tuple(region)


@dataclass(frozen=True)
class DensityPiece:
    """One parametric density piece.

    The density at ``z`` is ``base(sign * z)`` when ``lo < sign * z < hi``
    and zero otherwise, where ``base`` is one of

    * ``exponential``: ``c * exp(-beta * w)``
    * ``power_law_cutoff``: ``c * w**(-1 - a) * exp(-beta * w)``
    * ``beta``: ``c * w**(a - 1) * (1 - w)**(b - 1) / B(a, b)`` on ``(0, 1)``

    ``sign = -1`` mirrors the piece onto the negative half line, which is how
    two-sided environment densities are built.
    """

    kind: str
    c: float
    beta: float = 0.0
    a: float = 0.0
    b: float = 1.0
    lo: float = 0.0
    hi: float = math.inf
    sign: int = 1

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise AdmissibilityError(f"unknown density kind {self.kind!r}")
        if not (self.c > 0 and math.isfinite(self.c)):
            raise AdmissibilityError("density coefficient c must be positive and finite")
        if self.lo < 0 or not self.hi > self.lo:
            raise AdmissibilityError("density piece needs 0 <= lo < hi")
        if self.sign not in (1, -1):
            raise AdmissibilityError("sign must be +1 or -1")
        if self.beta < 0:
            raise AdmissibilityError("beta must be nonnegative")
        if math.isinf(self.hi) and self.kind != "beta" and self.beta <= 0:
            raise AdmissibilityError("an unbounded piece needs an exponential cutoff beta > 0")
        if self.kind == "power_law_cutoff" and not 0 < self.a < 2:
            raise AdmissibilityError("power-law index a must lie in (0, 2)")
        if self.kind == "beta":
            if not (self.a > 0 and self.b >= 1):
                raise AdmissibilityError("beta piece needs a > 0 and b >= 1")
            if self.hi > 1:
                raise AdmissibilityError("beta piece lives on (0, 1)")

    def base(self, w):
        w = np.asarray(w, dtype=float)
        if self.kind == "exponential":
            return self.c * np.exp(-self.beta * w)
        ws = np.maximum(w, _TINY)
        if self.kind == "power_law_cutoff":
            return self.c * np.exp(-(1.0 + self.a) * np.log(ws) - self.beta * w)
        norm = special.beta(self.a, self.b)
        return self.c * ws ** (self.a - 1) * np.clip(1 - w, 0, None) ** (self.b - 1) / norm

    def density(self, z):
        w = self.sign * np.asarray(z, dtype=float)
        inside = (w > self.lo) & (w < self.hi)
        out = np.zeros(np.shape(w))
        if np.any(inside):
            out[inside] = self.base(w[inside])
        return out

    @property
    def singular_at_lo(self) -> bool:
        if self.lo > 0:
            return False
        return self.kind == "power_law_cutoff" or (self.kind == "beta" and self.a < 1)

    @property
    def nonincreasing(self) -> bool:
        return self.kind != "beta" or (self.a <= 1 and self.b >= 1)

    def effective_hi(self, growth: float = 0.0) -> float:
        """Upper end beyond which the piece is negligible for integrands
        growing at most like ``exp(growth * w)`` times a polynomial."""
        if math.isfinite(self.hi):
            return self.hi
        rate = self.beta - growth
        if rate <= 0:
            raise AdmissibilityError(
                f"density tail exp(-{self.beta} w) does not dominate growth exp({growth} w)")
        z = max(self.lo, 1.0)
        target = 45.0 + math.log(max(self.c, 1.0))
        for _ in range(100):
            z_new = max(self.lo, 1.0, (target + 8.0 * math.log1p(z)) / rate)
            if abs(z_new - z) < 1e-9 * z_new:
                break
            z = z_new
        return z_new

    def w_range(self, iv: Interval) -> tuple[float, float] | None:
        """The ``w``-range of this piece inside the interval ``iv``."""
        if self.sign == 1:
            lo, hi = max(self.lo, iv.lo), min(self.hi, iv.hi)
        else:
            lo, hi = max(self.lo, -iv.hi), min(self.hi, -iv.lo)
        if not hi > lo:
            return None
        return lo, hi

    def breakpoints(self) -> list[float]:
        pts = [self.sign * self.lo]
        if math.isfinite(self.hi):
            pts.append(self.sign * self.hi)
        return pts


def _integrate_piece(piece: DensityPiece, func, wlo: float, whi: float,
                     growth: float, quad: QuadratureConfig, breakpoints=()) -> float:
    whi = min(whi, piece.effective_hi(growth)) if math.isinf(whi) else whi
    if not whi > wlo:
        return 0.0
    s = piece.sign

    def integrand(w):
        return func(s * w) * piece.base(w)

    bps = sorted({s * b for b in breakpoints if wlo < s * b < whi})
    total = 0.0
    # log substitution below 1 where singular behavior and many decades live
    split = min(max(wlo, 1.0), whi)
    if wlo < split:
        lo = max(wlo, _POWER_FLOOR if piece.kind == "power_law_cutoff" else _TINY)
        if wlo == 0 and not piece.singular_at_lo:
            total += integrate_interval(integrand, 0.0, split, quad=quad, breakpoints=bps)[0]
        else:
            total += integrate_interval(integrand, lo, split, log=True, quad=quad,
                                        breakpoints=bps)[0]
    if split < whi:
        log = whi / split > 64
        total += integrate_interval(integrand, split, whi, log=log, quad=quad,
                                    breakpoints=bps)[0]
    return total


@dataclass(frozen=True, eq=False)
class JumpMeasure:
    """A jump measure given by density pieces plus atoms.

    Parameters
    ----------
    support : Interval
        ``(0, inf)`` for branching, the real line for environment, ``[0, 1]``
        for catastrophe laws.
    pieces : tuple of DensityPiece
    atoms : tuple of (location, mass)
    family_tag : str
        Human-readable label such as ``"exponential"``.
    """

    support: Interval
    pieces: tuple = ()
    atoms: tuple = ()
    family_tag: str = "custom"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        for loc, mass in self.atoms:
            if not mass > 0:
                raise AdmissibilityError("atom masses must be strictly positive")
            if not bool(self.support.contains(loc)):
                raise AdmissibilityError(f"atom at {loc} lies outside the support")
        for p in self.pieces:
            for end in (p.sign * p.lo, p.sign * p.hi):
                if math.isfinite(end) and not (self.support.lo <= end <= self.support.hi):
                    raise AdmissibilityError("density piece extends beyond the support")

    @property
    def is_zero(self) -> bool:
        return not self.pieces and not self.atoms

    @property
    def has_density(self) -> bool:
        return bool(self.pieces)

    @cached_property
    def infinite_activity(self) -> bool:
        return any(p.singular_at_lo and p.kind == "power_law_cutoff" for p in self.pieces)

    @cached_property
    def atom_locations(self) -> np.ndarray:
        return np.array([a[0] for a in self.atoms], dtype=float)

    @cached_property
    def atom_masses(self) -> np.ndarray:
        return np.array([a[1] for a in self.atoms], dtype=float)

    def density(self, z):
        """Total density at ``z`` (atoms excluded)."""
        z = np.asarray(z, dtype=float)
        out = np.zeros(np.shape(z))
        for p in self.pieces:
            out = out + p.density(z)
        return out

    def breakpoints(self) -> list[float]:
        pts = []
        for p in self.pieces:
            pts.extend(p.breakpoints())
        return pts

    def integrate(self, func: Callable, region=EVERYTHING, *, growth: float = 0.0,
                  quad: QuadratureConfig = DEFAULT_QUAD, breakpoints: Sequence = (),
                  atoms: bool = True) -> float:
        """Integrate a vectorized ``func`` against the measure over ``region``.

        ``growth`` declares that ``func`` may grow like ``exp(growth*|z|)``
        so the tail cutoff of unbounded pieces accounts for it.
        """
        total = 0.0
        for iv in _as_region(region):
            if iv.is_empty:
                continue
            for p in self.pieces:
                rng = p.w_range(iv)
                if rng is None:
                    continue
                total += _integrate_piece(p, func, rng[0], rng[1], growth, quad, breakpoints)
            if atoms and self.atoms:
                locs = self.atom_locations
                mask = iv.contains(locs)
                if np.any(mask):
                    vals = np.asarray(func(locs[mask]), dtype=float)
                    total += float(np.sum(vals * self.atom_masses[mask]))
        return float(total)

    def sampler(self, region) -> "RestrictedSampler":
        key = _as_region(region)
        with self._lock:
            s = self._cache.get(("sampler", key))
            if s is None:
                s = RestrictedSampler(self, key)
                self._cache[("sampler", key)] = s
        return s

    def cached(self, key, compute):
        """Memoize a derived scalar (moments, compensators) on the measure."""
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        value = compute()
        with self._lock:
            self._cache[key] = value
        return value


class CatastropheLaw(JumpMeasure):
    """A probability measure on ``[0, 1]`` for catastrophe factors."""

    def __post_init__(self):
        super().__post_init__()
        total = truncated_mass(self, self.support)
        if abs(total - 1.0) > 1e-12:
            raise AdmissibilityError(f"catastrophe law has total mass {total!r}, expected 1")

    @cached_property
    def one_minus_mean(self) -> float:
        """``int (1 - z) q(dz)``."""
        return self.integrate(lambda z: 1.0 - z, self.support)

    def power_moment(self, theta: float) -> float:
        """``int (z**theta - 1) q(dz)`` with ``0**theta = 0``."""
        def f(z):
            z = np.asarray(z, dtype=float)
            with np.errstate(divide="ignore"):
                return np.where(z > 0, np.expm1(theta * np.log(np.maximum(z, _TINY))), -1.0)
        return self.cached(("power_moment", float(theta)), lambda: self.integrate(f, self.support))

    def mass_below(self, t: float) -> float:
        """``q([0, t])``."""
        return truncated_mass(self, Interval(0.0, t, True, True))


def truncated_mass(measure: JumpMeasure, region, quad: QuadratureConfig = DEFAULT_QUAD) -> float:
    """Mass of ``measure`` on ``region`` (density integral plus atoms).

    Raises
    ------
    AdmissibilityError
        When the density integral diverges, which happens for an
        infinite-activity piece on a region reaching down to zero.
    """
    region = _as_region(region)
    for iv in region:
        if iv.is_empty:
            continue
        for p in measure.pieces:
            rng = p.w_range(iv)
            if rng is not None and rng[0] == 0 and p.kind == "power_law_cutoff":
                raise AdmissibilityError(
                    "region touches zero where the density has infinite mass")
    return measure.integrate(lambda z: np.ones(np.shape(z)), region, quad=quad)


def _integral_diverges(slab: Callable[[float, float], float], eps0: float = 1e-2) -> bool:
    """Ratio test on the slab integrals ``slab(eps/1e4, eps)`` as ``eps -> 0``.

    Slabs shrink geometrically for a convergent power-type integral and stay
    flat or grow for a divergent one.
    """
    d1 = slab(eps0 * 1e-8, eps0 * 1e-4)
    d2 = slab(eps0 * 1e-12, eps0 * 1e-8)
    if d2 <= 1e-14 * (1.0 + abs(d1)):
        return False
    return d2 > 0.5 * d1


def branching_admissible(mu: JumpMeasure) -> float:
    """Check ``int (z ^ z**2) mu(dz) < inf`` and return its value."""
    def slab(a, b):
        return mu.integrate(lambda z: z * z, Interval(a, b))
    if mu.has_density and _integral_diverges(slab):
        raise AdmissibilityError("int_0^1 z^2 mu(dz) diverges")
    return mu.integrate(lambda z: np.minimum(z, z * z), Interval(0.0, math.inf))


def environment_admissible(nu: JumpMeasure) -> float:
    """Check the small-jump and large-jump integrability of ``nu``."""
    def slab(a, b):
        return nu.integrate(lambda z: z * z, (Interval(-b, -a, True, False), Interval(a, b)))
    if nu.has_density and _integral_diverges(slab):
        raise AdmissibilityError("int_{-1}^{1} z^2 nu(dz) diverges")
    small = nu.integrate(lambda z: z * z, Interval(-1.0, 1.0, True, True))
    large = nu.integrate(lambda z: np.abs(np.expm1(z)),
                         (Interval(-math.inf, -1.0, True, False), Interval(1.0, math.inf, False, True)),
                         growth=1.0)
    return small + large


class RestrictedSampler:
    """Inverse-CDF sampler for a measure restricted to a region.

    Each density piece gets a table of cumulative masses on 4096 panels (in
    ``log w`` away from zero, in ``w`` when the piece starts at zero with a
    finite density) and is inverted by linear interpolation inside a panel.
    The far tail is cut where its mass falls below ``1e-14`` of the total.
    """

    n_panels = 4096

    def __init__(self, measure: JumpMeasure, region: tuple[Interval, ...]):
        self.measure = measure
        comps = []  # (mass, kind, payload)
        for iv in region:
            if iv.is_empty:
                continue
            for p in measure.pieces:
                rng = p.w_range(iv)
                if rng is None:
                    continue
                if rng[0] == 0 and p.singular_at_lo and p.kind == "power_law_cutoff":
                    raise DomainError("cannot sample an infinite-mass region; truncate away from zero")
                table = self._table(p, *rng)
                if table[2][-1] > 0:
                    comps.append((table[2][-1], "density", (p, table)))
            if measure.atoms:
                mask = iv.contains(measure.atom_locations)
                for loc, m in zip(measure.atom_locations[mask], measure.atom_masses[mask]):
                    comps.append((float(m), "atom", float(loc)))
        self.total = float(sum(c[0] for c in comps))
        if not self.total > 0:
            raise DomainError("cannot sample from a region of zero mass")
        self.components = comps
        self.cum = np.cumsum([c[0] for c in comps]) / self.total

    def _table(self, p: DensityPiece, wlo: float, whi: float):
        if math.isinf(whi):
            whi = p.effective_hi(0.0)
        log = not (wlo == 0 and not p.singular_at_lo)
        if log:
            wlo = max(wlo, _TINY)
            edges = np.linspace(math.log(wlo), math.log(whi), self.n_panels + 1)
        else:
            edges = np.linspace(wlo, whi, self.n_panels + 1)
        x, w = np.polynomial.legendre.leggauss(8)
        mid = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 * (edges[1:] - edges[:-1])
        nodes = mid[:, None] + half[:, None] * x[None, :]
        if log:
            vals = p.base(np.exp(nodes)) * np.exp(nodes)
        else:
            vals = p.base(nodes)
        masses = (vals @ w) * half
        cum = np.concatenate([[0.0], np.cumsum(masses)])
        return edges, log, cum

    def sample(self, rng: np.random.Generator, size: int):
        """Draw ``size`` points.

        Returns
        -------
        values : ndarray
        is_atom : ndarray of bool
        """
        u_comp = rng.random(size)
        u_in = rng.random(size)
        idx = np.searchsorted(self.cum, u_comp, side="right")
        idx = np.minimum(idx, len(self.components) - 1)
        out = np.empty(size)
        is_atom = np.zeros(size, dtype=bool)
        for k, (_, kind, payload) in enumerate(self.components):
            sel = idx == k
            if not np.any(sel):
                continue
            if kind == "atom":
                out[sel] = payload
                is_atom[sel] = True
                continue
            p, (edges, log, cum) = payload
            target = u_in[sel] * cum[-1]
            j = np.clip(np.searchsorted(cum, target, side="right") - 1, 0, len(edges) - 2)
            span = cum[j + 1] - cum[j]
            frac = np.where(span > 0, (target - cum[j]) / np.where(span > 0, span, 1.0), 0.5)
            t = edges[j] + frac * (edges[j + 1] - edges[j])
            w = np.exp(t) if log else t
            out[sel] = p.sign * w
        return out, is_atom


def sample_restricted(measure: JumpMeasure, region, rng: np.random.Generator) -> float:
    """One draw from ``measure`` restricted to ``region`` and normalized."""
    return float(measure.sampler(region).sample(rng, 1)[0][0])


def overlap_density(measure: JumpMeasure, x: float, z):
    """Density of ``mu_x = mu ^ (delta_x * mu)`` at ``z``."""
    z = np.asarray(z, dtype=float)
    return np.minimum(measure.density(z), measure.density(z - x))


def rho(measure: JumpMeasure, x: float, z):
    """Ratio ``d mu_x / d mu`` at ``z``; equal to 1 when ``x == 0``.

    Only the density part enters; atoms are coupled synchronously.

    Raises
    ------
    DomainError
        If the density vanishes at ``z`` while ``x != 0``.
    """
    z = np.asarray(z, dtype=float)
    if x == 0:
        return np.ones(np.shape(z)) if z.ndim else 1.0
    m = measure.density(z)
    if np.any(m <= 0):
        raise DomainError("rho is undefined where the density vanishes")
    out = np.clip(np.minimum(m, measure.density(z - x)) / m, 0.0, 1.0)
    return out if z.ndim else float(out)


def rho_safe(measure: JumpMeasure, x: float, z):
    """As :func:`rho` but returns 0 where the density vanishes."""
    z = np.asarray(z, dtype=float)
    if x == 0:
        return (measure.density(z) > 0).astype(float)
    m = measure.density(z)
    pos = m > 0
    out = np.zeros(np.shape(z))
    out[pos] = np.minimum(m[pos], measure.density(z[pos] - x)) / m[pos]
    return np.clip(out, 0.0, 1.0)


def rho_pairs(measure: JumpMeasure, shifts, z) -> np.ndarray:
    """Elementwise ``rho(shifts[i], z[i])`` (0 where the density vanishes)."""
    shifts = np.asarray(shifts, dtype=float)
    z = np.asarray(z, dtype=float)
    m = measure.density(z)
    m2 = measure.density(z - shifts)
    pos = m > 0
    out = np.where(pos, np.minimum(m, m2) / np.where(pos, m, 1.0), 0.0)
    out = np.where(shifts == 0, pos.astype(float), out)
    return np.clip(out, 0.0, 1.0)


def overlap_mass(measure: JumpMeasure, x: float, quad: QuadratureConfig = DEFAULT_QUAD) -> float:
    """Total mass ``mu_x(R_+)`` of the overlap measure.

    Symmetric in ``x``; equals the total density mass at ``x = 0`` (infinite
    for infinite-activity measures).
    """
    if not measure.has_density:
        raise UnsupportedCouplingError("overlap needs a density part")
    x = float(x)
    if x == 0:
        if measure.infinite_activity:
            return math.inf
        return measure.integrate(lambda z: np.ones(np.shape(z)), Interval(0.0, math.inf), atoms=False)
    key = ("overlap", x, quad)

    def compute():
        start = max(0.0, x)
        bps = [b + x for b in measure.breakpoints()] + measure.breakpoints()
        return measure.integrate(lambda z: rho_safe(measure, x, z),
                                 Interval(start, math.inf), quad=quad,
                                 breakpoints=bps, atoms=False)
    return measure.cached(key, compute)


# config construction ----------------------------------------------------------

_POSITIVE = Interval(0.0, math.inf, False, False)
_REAL = Interval(-math.inf, math.inf, False, False)
_UNIT = Interval(0.0, 1.0, True, True)


def _pieces_from_config(cfg: dict, sign: int = 1) -> tuple[list, list]:
    fam = cfg["family"]
    lo = float(cfg.get("lo", 0.0))
    hi = float(cfg.get("hi", math.inf))
    if fam == "zero":
        return [], []
    if fam == "exponential":
        return [DensityPiece("exponential", float(cfg["c"]), beta=float(cfg["beta"]),
                             lo=lo, hi=hi, sign=sign)], []
    if fam == "power_law_cutoff":
        return [DensityPiece("power_law_cutoff", float(cfg["c"]), beta=float(cfg.get("beta", 0.0)),
                             a=float(cfg["a"]), lo=lo, hi=hi, sign=sign)], []
    if fam == "beta":
        return [DensityPiece("beta", float(cfg.get("c", 1.0)), a=float(cfg["a"]), b=float(cfg["b"]),
                             lo=0.0, hi=1.0, sign=sign)], []
    if fam == "atoms":
        return [], [(sign * float(loc), float(m)) for loc, m in cfg["atoms"]]
    if fam == "sum":
        pieces, atoms = [], []
        for term in cfg["terms"]:
            p, a = _pieces_from_config(term, sign)
            pieces += p
            atoms += a
        return pieces, atoms
    if fam == "two_sided":
        pieces, atoms = [], []
        for key, s in (("positive", 1), ("negative", -1)):
            if key in cfg:
                p, a = _pieces_from_config(cfg[key], s * sign)
                pieces += p
                atoms += a
        return pieces, atoms
    raise AdmissibilityError(f"unknown measure family {fam!r}")


def _merge_atoms(atoms):
    merged: dict[float, float] = {}
    for loc, m in atoms:
        merged[loc] = merged.get(loc, 0.0) + m
    return tuple(sorted(merged.items()))


def measure_from_config(cfg: dict | None, kind: str) -> JumpMeasure:
    """Build a measure from a ``{family, ...}`` record.

    Parameters
    ----------
    kind : {"branching", "environment", "catastrophe"}
    """
    cfg = cfg or {"family": "zero"}
    pieces, atoms = _pieces_from_config(cfg)
    atoms = _merge_atoms(atoms)
    tag = cfg["family"]
    if kind == "branching":
        if any(p.sign < 0 for p in pieces) or any(loc <= 0 for loc, _ in atoms):
            raise AdmissibilityError("branching measure must live on (0, inf)")
        m = JumpMeasure(_POSITIVE, tuple(pieces), atoms, tag)
        branching_admissible(m)
        return m
    if kind == "environment":
        m = JumpMeasure(_REAL, tuple(pieces), tuple((l, w) for l, w in atoms if l != 0), tag)
        environment_admissible(m)
        return m
    if kind == "catastrophe":
        return CatastropheLaw(_UNIT, tuple(pieces), atoms, tag)
    raise ValueError(kind)


def zero_measure(kind: str) -> JumpMeasure:
    if kind == "branching":
        return JumpMeasure(_POSITIVE, (), (), "zero")
    return JumpMeasure(_REAL, (), (), "zero")
