"""Small numerical kernel: jittered Cholesky, log-space sums, samplers and
conditional Gaussian covariances.

Everything here is a pure function of its arguments (and of the generator it
is handed), so it can be called from any number of particle workers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import NotPositiveDefinite, ValidationError

#: ``kind`` tags used to separate the counter-based streams of one run.
STREAM_INIT = 0
STREAM_MOVE = 1
STREAM_RESAMPLE = 2
STREAM_CHAIN = 3


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor ``L`` with ``L @ L.T == M + jitter * I``."""

    lower: np.ndarray
    jitter: float = 0.0

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def _jitter_ladder(jitter_max):
    ladder = [0.0]
    exponent = -12
    while 10.0**exponent <= jitter_max * (1 + 1e-12):
        ladder.append(10.0**exponent)
        exponent += 1
    return ladder


def cholesky(M, jitter_max: float = 1e-4) -> CholeskyFactor:
    """Cholesky factor of a symmetric matrix, adding the smallest diagonal
    jitter from ``{0, 1e-12, 1e-11, ..., jitter_max}`` that makes it work.

    Raises
    ------
    ValidationError
        If ``M`` is not square or not symmetric to 1e-10 relative.
    NotPositiveDefinite
        If no jitter up to ``jitter_max`` gives a factorisation.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValidationError(f"cholesky needs a square matrix, got shape {M.shape}")
    scale = max(np.max(np.abs(M)), np.finfo(float).tiny) if M.size else 1.0
    if M.size and np.max(np.abs(M - M.T)) > 1e-10 * scale:
        raise ValidationError("cholesky input is not symmetric")
    eye = np.eye(M.shape[0])
    for eps in _jitter_ladder(jitter_max):
        try:
            lower = np.linalg.cholesky(M + eps * eye)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(lower)) and np.all(np.diag(lower) > 0):
            return CholeskyFactor(lower, eps)
    raise NotPositiveDefinite(
        f"matrix is not positive definite even with jitter {jitter_max:g}"
    )


def log_sum_exp(v) -> float:
    """``log(sum(exp(v)))`` via the max shift; exactly ``-inf`` when every
    entry is ``-inf``."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise ValidationError("log_sum_exp of an empty vector")
    m = np.max(v)
    if m == -np.inf:
        return -np.inf
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(v - m))))


def sample_mvn(mean, factor: CholeskyFactor, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (factor.dim,):
        raise ValidationError(
            f"mean has shape {mean.shape}, factor is {factor.dim}-dimensional"
        )
    z = rng.standard_normal(factor.dim)
    return mean + factor.lower @ z


def sample_inverse_gamma(shape, rate, rng: np.random.Generator, size=None):
    """Inverse-gamma draw with density proportional to
    ``x**(-shape-1) * exp(-rate/x)``, obtained as ``rate / Gamma(shape, 1)``."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(shape <= 0) or np.any(rate <= 0):
        raise ValidationError("inverse gamma needs shape > 0 and rate > 0")
    draw = rate / rng.standard_gamma(shape, size=size)
    if np.ndim(draw) == 0:
        return float(draw)
    return draw


def precision_matrix(Sigma) -> np.ndarray:
    Sigma = np.asarray(Sigma, dtype=float)
    try:
        cf = linalg.cho_factor(Sigma, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite("covariance matrix is singular") from exc
    Q = linalg.cho_solve(cf, np.eye(Sigma.shape[0]))
    return 0.5 * (Q + Q.T)


def conditional_gaussian_cov(Sigma, block, precision=None) -> np.ndarray:
    """Covariance of ``x[block]`` given the remaining coordinates when
    ``x ~ N(m, Sigma)``; equals ``inv(Q[block, block])`` with ``Q = inv(Sigma)``.

    ``precision`` may be passed to avoid re-inverting ``Sigma`` for every
    block of a partition.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    P = Sigma.shape[0]
    idx = np.atleast_1d(np.asarray(block, dtype=int))
    if idx.size == 0:
        raise ValidationError("conditioning block is empty")
    if np.any(idx < 0) or np.any(idx >= P):
        raise ValidationError(f"block indices out of range for dimension {P}")
    Q = precision_matrix(Sigma) if precision is None else np.asarray(precision)
    Qbb = Q[np.ix_(idx, idx)]
    try:
        cf = linalg.cho_factor(Qbb, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite("precision sub-block is singular") from exc
    cov = linalg.cho_solve(cf, np.eye(idx.size))
    return 0.5 * (cov + cov.T)


def substream(seed: int, kind: int, stage: int = 0, index: int = 0) -> np.random.Generator:
    """Counter-based stream for ``(seed, kind, stage, index)``.

    Philox keyed by the run seed; the three high counter words carry the
    stream coordinates and the low word is left free for the draws.
    """
    if seed < 0:
        raise ValidationError("seed must be non-negative")
    bitgen = np.random.Philox(key=int(seed), counter=[0, int(kind), int(stage), int(index)])
    return np.random.Generator(bitgen)
