"""Posterior summaries and cross-sampler comparison tables."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .design import Design, radial_cubic_basis
from .errors import ValidationError
from .model import Family, cumulant


def _weights(n, weights):
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or not np.isfinite(w).all():
        raise ValidationError("weights must be non-negative, finite and one per draw")
    total = w.sum()
    if not total > 0:
        raise ValidationError("weights sum to zero")
    return w / total


def weighted_quantile(x, q, weights=None):
    """Quantiles by inverting the weighted empirical CDF, interpolating
    linearly between the cumulative-weight midpoints of the sorted draws."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValidationError("no draws")
    w = _weights(x.size, weights)
    order = np.argsort(x, kind="stable")
    xs, ws = x[order], w[order]
    cw = np.cumsum(ws) - 0.5 * ws
    return np.interp(q, cw, xs)


@dataclass
class Summary:
    names: tuple
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray  # 2.5% point
    upper: np.ndarray  # 97.5% point

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"parameter": list(self.names), "mean": self.mean, "sd": self.sd,
                             "q2.5": self.lower, "q97.5": self.upper})


def summarize(draws, weights=None, names=None) -> Summary:
    """Weighted mean, sd and equal-tailed 95% interval of every column."""
    X = np.asarray(draws, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise ValidationError("cannot summarise an empty sample")
    w = _weights(X.shape[0], weights)
    mean = w @ X
    sd = np.sqrt(np.maximum(w @ (X - mean) ** 2, 0.0))
    lo = np.array([weighted_quantile(X[:, j], 0.025, w) for j in range(X.shape[1])])
    hi = np.array([weighted_quantile(X[:, j], 0.975, w) for j in range(X.shape[1])])
    names = tuple(names) if names is not None else tuple(f"p{j}" for j in range(X.shape[1]))
    return Summary(names, mean, sd, lo, hi)


@dataclass(frozen=True)
class CarpenterEss:
    value: float
    identical_runs: bool = False  # set when the run means have zero spread


def carpenter_ess(run_means, run_vars) -> CarpenterEss:
    """Average within-run posterior variance over the across-run variance
    of the posterior means (divisor ``R - 1``)."""
    m = np.asarray(run_means, dtype=float)
    v = np.asarray(run_vars, dtype=float)
    if m.ndim != 1 or m.shape != v.shape:
        raise ValidationError("run_means and run_vars must be vectors of equal length")
    if m.size < 2:
        raise ValidationError("need at least two runs")
    between = np.var(m, ddof=1)
    if between == 0:
        return CarpenterEss(np.inf, True)
    return CarpenterEss(float(np.mean(v) / between))


def batch_means_mcse(x, n_batches: int | None = None) -> float:
    """Monte Carlo standard error of the mean of a correlated chain by
    non-overlapping batch means (``sqrt(n)`` batches by default)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    b = n_batches or int(np.sqrt(n))
    if b < 2 or n < 2 * b:
        raise ValidationError("chain too short for batch means")
    size = n // b
    means = x[: b * size].reshape(b, size).mean(axis=1)
    return float(np.std(means, ddof=1) / np.sqrt(b))


def _ess_weights(w):
    return 1.0 / np.sum(w**2)


def kde(draws, weights=None, grid=None) -> np.ndarray:
    """Weighted Gaussian kernel density on ``grid``.

    Bandwidth ``0.9 min(sd, IQR/1.34) n_eff^(-1/5)`` with ``n_eff`` the
    weight ESS; counting resampled duplicates in ``n_eff`` would undersmooth.
    """
    x = np.asarray(draws, dtype=float).ravel()
    grid = np.asarray(grid, dtype=float)
    w = _weights(x.size, weights)
    if x.size < 2 or np.ptp(x[w > 0]) == 0:
        raise ValidationError(
            "kernel density needs at least two distinct draws; every particle "
            "carries the same value (duplicated after resampling?)"
        )
    mean = w @ x
    sd = np.sqrt(w @ (x - mean) ** 2)
    q25, q75 = weighted_quantile(x, [0.25, 0.75], w)
    spread = min(sd, (q75 - q25) / 1.34)
    if not spread > 0:
        spread = sd
    h = 0.9 * spread * _ess_weights(w) ** -0.2
    out = np.empty(grid.shape)
    flat = out.ravel()
    g = grid.ravel()
    step = max(1, 2_000_000 // x.size)
    for a in range(0, g.size, step):
        u = (g[a:a + step, None] - x[None, :]) / h
        flat[a:a + step] = np.exp(-0.5 * u * u) @ w
    return flat.reshape(grid.shape) / (h * np.sqrt(2.0 * np.pi))


def qq_pairs(a, b, n_quantiles: int = 100) -> np.ndarray:
    """``(n_quantiles, 2)`` matched empirical quantiles at levels
    ``(i - 0.5) / n_quantiles``."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValidationError("QQ pairs need two non-empty samples")
    if n_quantiles < 1:
        raise ValidationError("n_quantiles must be positive")
    levels = (np.arange(1, n_quantiles + 1) - 0.5) / n_quantiles
    return np.column_stack([np.quantile(a, levels), np.quantile(b, levels)])


def _spline_term(design: Design, term):
    for sp in design.splines:
        if term is None or sp.column == term:
            return sp
    raise ValidationError(f"no spline term for {term!r} in the design")


def curve_estimate(design: Design, nu_mean, grid, term=None) -> np.ndarray:
    """Fitted smooth ``beta_x x_std + Z(x_std) u`` at raw-scale ``grid``
    values, using the standardisation and knots stored in the design."""
    nu_mean = np.asarray(nu_mean, dtype=float)
    if nu_mean.shape != (design.C.shape[1],):
        raise ValidationError("coefficient vector does not match the design")
    sp = _spline_term(design, term)
    xs = sp.standardisation.apply(grid)
    u = nu_mean[design.blocks[sp.block_index].slice]
    return nu_mean[sp.fixed_index] * xs + radial_cubic_basis(xs, sp.basis) @ u


def curve_at_means(design: Design, nu_mean, grid, term=None, family=Family.POISSON):
    """The smooth plus every other fixed effect at its sample average, on
    the linear-predictor and mean scales. Returns ``(eta, mean)``."""
    sp = _spline_term(design, term)
    nu_mean = np.asarray(nu_mean, dtype=float)
    beta = nu_mean[: design.q_beta].copy()
    beta[sp.fixed_index] = 0.0
    offset = float(design.column_means @ beta)
    eta = offset + curve_estimate(design, nu_mean, grid, sp.column)
    return eta, cumulant(Family.parse(family), eta, 1)
