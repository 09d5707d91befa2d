"""Monte Carlo checks of exponential contraction and the weighted TV distance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .certify import ControlFunctions, DriftCertificate
from .coupling import CouplingConfig, simulate_pairs
from .errors import DomainError
from .model import ModelSpec
from .simulate import SimConfig, simulate_states


def _V(x, theta_v):
    return (1.0 + np.asarray(x, dtype=float)) ** theta_v


# weighted total variation -------------------------------------------------------------


@dataclass(frozen=True)
class WVEstimate:
    value: float
    bin_error: float
    n_bins: int


def _partition(pooled: np.ndarray, bins):
    """Bin index function and representative points for the pooled sample."""
    if isinstance(bins, (int, np.integer)):
        uniq = np.unique(pooled)
        if uniq.size <= bins:
            # few distinct values: one bin per value
            return (lambda s: np.searchsorted(uniq, s)), uniq, uniq.size
        cut = np.quantile(pooled, 0.99)
        edges = np.unique(np.quantile(pooled[pooled <= cut], np.linspace(0, 1, bins + 1)))
        tail = pooled[pooled > edges[-1]]
        centers = 0.5 * (edges[:-1] + edges[1:])
        if tail.size:
            centers = np.append(centers, tail.mean())

        def index(s):
            k = np.searchsorted(edges, s, side="right") - 1
            k = np.clip(k, 0, len(edges) - 2)
            return np.where(s > edges[-1], len(edges) - 1, k)
        return index, centers, len(centers)
    edges = np.asarray(bins, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise DomainError("bin edges must be strictly increasing")
    if pooled.min() < edges[0] or pooled.max() > edges[-1]:
        raise DomainError("bins do not cover the samples")
    centers = 0.5 * (edges[:-1] + edges[1:])

    def index(s):
        return np.clip(np.searchsorted(edges, s, side="right") - 1, 0, len(edges) - 2)
    return index, centers, len(centers)


def wv_estimate(samples_a, samples_b, theta_v: float, bins=128) -> WVEstimate:
    """Binned ``W_V`` and a bound on its binning error.

    The estimate is ``sum_k V(c_k) |p_a(k) - p_b(k)|`` with ``c_k`` the bin
    representative.  ``bin_error`` is ``sum_k osc_k (p_a(k) + p_b(k))``,
    where ``osc_k`` is the largest gap between ``V(c_k)`` and ``V`` at a
    sample in bin ``k``.

    Parameters
    ----------
    bins : int or array of edges
        An integer requests that many pooled-quantile bins below the 99%
        quantile plus a tail bin represented by the tail mean; samples with
        at most ``bins`` distinct values get one bin per value.
    """
    a = np.asarray(samples_a, dtype=float).ravel()
    b = np.asarray(samples_b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise DomainError("wv_distance needs nonempty samples")
    pooled = np.concatenate([a, b])
    index, centers, nb = _partition(pooled, bins)
    ia, ib = index(a), index(b)
    pa = np.bincount(ia, minlength=nb) / a.size
    pb = np.bincount(ib, minlength=nb) / b.size
    vc = _V(centers, theta_v)
    value = float(np.sum(vc * np.abs(pa - pb)))
    ip = index(pooled)
    dev = np.abs(_V(pooled, theta_v) - vc[ip])
    osc = np.zeros(nb)
    np.maximum.at(osc, ip, dev)
    return WVEstimate(value, float(np.sum(osc * (pa + pb))), nb)


def wv_distance(samples_a, samples_b, theta_v: float, bins=128) -> float:
    """Binned weighted total variation distance between two samples."""
    return wv_estimate(samples_a, samples_b, theta_v, bins).value


# contraction ----------------------------------------------------------------------------


@dataclass
class ErgodicityReport:
    """Decay of ``E F(X_t, Y_t)`` along an ensemble of coupled pairs."""

    times: np.ndarray
    mean_F: np.ndarray
    se: np.ndarray
    coupling_bound: np.ndarray
    wv: np.ndarray
    wv_error: np.ndarray
    p_coupled: np.ndarray
    fitted_rate: float
    rate_ci: tuple
    certified_lambda: float
    F0: float
    contraction_ok: np.ndarray
    degenerate: bool
    n_paths: int
    n_excluded: int
    window: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    @property
    def contraction_holds(self) -> bool:
        return bool(np.all(self.contraction_ok))

    def to_dict(self) -> dict:
        return {
            "fitted_rate": self.fitted_rate, "rate_ci": list(self.rate_ci),
            "certified_lambda": self.certified_lambda, "F0": self.F0,
            "contraction_holds": self.contraction_holds, "degenerate": self.degenerate,
            "n_paths": self.n_paths, "n_excluded": self.n_excluded,
            "window": [float(t) for t in self.times[self.window]],
        }

    def to_csv(self) -> str:
        lines = ["t,mean_F,se,coupling_bound,wv"]
        for row in zip(self.times, self.mean_F, self.se, self.coupling_bound, self.wv):
            lines.append(",".join(format(float(v), ".17g") for v in row))
        return "\n".join(lines) + "\n"


def fit_rate(times, mean, se):
    """Weighted least squares of ``log mean_F`` on ``t`` over the resolved window.

    The window is every ``t > 0`` with ``mean_F > 10 se``; weights are
    ``(mean/se)^2``, the inverse delta-method variance of the log.

    Returns
    -------
    rate, (lo, hi), window, degenerate
    """
    times, mean, se = (np.asarray(v, dtype=float) for v in (times, mean, se))
    window = (times > 0) & (mean > 10 * se) & (se > 0)
    if window.sum() < 2:
        return math.nan, (math.nan, math.nan), window, True
    t, yv = times[window], np.log(mean[window])
    w = (mean[window] / se[window]) ** 2
    W = np.sum(w)
    tm, ym = np.sum(w * t) / W, np.sum(w * yv) / W
    stt = np.sum(w * (t - tm) ** 2)
    if stt <= 0:
        return math.nan, (math.nan, math.nan), window, True
    slope = np.sum(w * (t - tm) * (yv - ym)) / stt
    resid = yv - ym - slope * (t - tm)
    dof = max(int(window.sum()) - 2, 1)
    # scale by the residual variance when it exceeds the sampling variance
    scale = max(1.0, float(np.sum(w * resid**2)) / dof)
    half = 1.96 * math.sqrt(scale / stt)
    rate = -float(slope)
    return rate, (rate - half, rate + half), window, False


def contraction_rate(model: ModelSpec, cert, x0: float, y0: float, n: int,
                     cfg: CouplingConfig, record_times=None, bins=128) -> ErgodicityReport:
    """Simulate coupled pairs and measure the decay of ``E F(X_t, Y_t)``.

    ``cert`` is a :class:`DriftCertificate` or bare :class:`ControlFunctions`
    (then ``certified_lambda`` is reported as ``nan``).  The contraction
    check at each time is ``e^{lambda t} mean_F <= F(x0, y0) (1 + 3 se/mean_F)``.
    """
    if isinstance(cert, DriftCertificate):
        cf, lam = cert.controls, cert.lam
    elif isinstance(cert, ControlFunctions):
        cf, lam = cert, math.nan
    else:
        raise TypeError("cert must be a DriftCertificate or ControlFunctions")
    if n < 2:
        raise DomainError("n must be at least 2")
    times, xs, ys, T, bad = simulate_pairs(model, x0, y0, n, cfg, record_times)
    keep = ~bad
    xs, ys, T = xs[:, keep], ys[:, keep], T[keep]
    m = xs.shape[1]
    Fv = cf.F(xs, ys)
    mean = Fv.mean(axis=1)
    se = Fv.std(axis=1, ddof=1) / math.sqrt(m)
    dv = np.where(xs != ys, _V(xs, cf.theta_v) + _V(ys, cf.theta_v), 0.0).mean(axis=1)
    wv = np.empty(len(times))
    werr = np.empty(len(times))
    for i in range(len(times)):
        est = wv_estimate(xs[i], ys[i], cf.theta_v, bins)
        wv[i], werr[i] = est.value, est.bin_error
    F0 = float(cf.F(x0, y0))
    rate, ci, window, degenerate = fit_rate(times, mean, se)
    if math.isnan(lam):
        ok = np.ones(len(times), bool)
    else:
        rel = np.divide(se, mean, out=np.zeros_like(se), where=mean > 0)
        ok = np.exp(lam * times) * mean <= F0 * (1 + 3 * rel) + 1e-12 * F0
    pc = np.array([np.mean(T <= t) for t in times])
    return ErgodicityReport(times, mean, se, dv, wv, werr, pc, rate, ci, lam, F0, ok,
                            degenerate, m, int(bad.sum()), window)


# stationary law -------------------------------------------------------------------------


@dataclass
class StationaryEstimate:
    samples: np.ndarray
    by_start: dict
    horizon: float
    ks_stat: float
    ks_pvalue: float
    ks_band95: float
    exploratory: bool
    n_excluded: int

    def summary(self) -> dict:
        s = self.samples
        return {
            "horizon": self.horizon, "n": int(s.size), "mean": float(np.mean(s)),
            "var": float(np.var(s)),
            "q05": float(np.quantile(s, 0.05)), "q50": float(np.quantile(s, 0.5)),
            "q95": float(np.quantile(s, 0.95)), "ks_stat": self.ks_stat,
            "ks_pvalue": self.ks_pvalue, "ks_band95": self.ks_band95,
            "mixed": bool(self.ks_stat <= self.ks_band95),
            "exploratory": self.exploratory, "n_excluded": self.n_excluded,
        }


def stationary_estimate(model: ModelSpec, cfg: SimConfig, burn_in: float, n: int,
                        starts=(0.0, 10.0), certified: bool = False) -> StationaryEstimate:
    """Approximate draws from the stationary law.

    ``n`` paths start from each point of ``starts`` and run for
    ``burn_in + cfg.t_end``.  The two-sample KS distance between the first
    two starts is the mixing diagnostic; ``1.36 sqrt(2/n)`` is its 95% band.
    Without a verified certificate the result is labelled exploratory.
    """
    if burn_in < 0:
        raise DomainError("burn_in must be nonnegative")
    horizon = burn_in + cfg.t_end
    run = cfg.replace(t_end=horizon)
    by_start = {}
    excluded = 0
    for i, x0 in enumerate(starts):
        _, states, bad = simulate_states(model, float(x0), n, run.replace(seed=cfg.seed + i),
                                         [horizon])
        by_start[float(x0)] = states[-1][~bad]
        excluded += int(bad.sum())
    samples = np.concatenate(list(by_start.values()))
    first = list(by_start.values())
    if len(first) >= 2:
        ks = stats.ks_2samp(first[0], first[1])
        ks_stat, ks_p = float(ks.statistic), float(ks.pvalue)
        band = 1.36 * math.sqrt(1.0 / first[0].size + 1.0 / first[1].size)
    else:
        ks_stat, ks_p, band = math.nan, math.nan, math.nan
    return StationaryEstimate(samples, by_start, horizon, ks_stat, ks_p, band,
                              not certified, excluded)
