"""Comparison samplers targeting the same posterior: a simple importance
sampler from the initial density, a random-walk Metropolis chain built on
the SMC move kernel, and a coordinate-wise slice sampler."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import BracketError, ValidationError
from .model import ModelSpec, block_sq_norms, cumulant, log_pi0_batch, log_pi_batch
from .pql import PqlFit, sample_pi0
from .smc import MoveConfig, MoveKernel, ess, normalise

log = logging.getLogger(__name__)

DEGENERACY_RATIO = 0.01


@dataclass
class WeightedSample:
    draws: np.ndarray  # (N, P + L)
    log_weights: np.ndarray  # normalised
    names: tuple = ()
    seconds: float = 0.0

    @property
    def N(self) -> int:
        return self.draws.shape[0]

    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def ess(self) -> float:
        return ess(self.log_weights)


@dataclass
class ChainOutput:
    """Post-burn-in states of one or more chains."""

    draws: np.ndarray  # (iters - burnin, P + L)
    acceptance: np.ndarray  # per block, over all iterations; empty for slice
    burnin: int
    names: tuple = ()
    seconds: float = 0.0


def _all_names(model):
    return tuple(model.names) + model.variance_names()


def importance_sampler(model: ModelSpec, pql: PqlFit, N: int, rng: np.random.Generator,
                       log_target=None) -> WeightedSample:
    """``N`` draws from the initial density weighted by ``pi / pi0``.

    ``log_target(nu, sigma_sq)`` replaces the posterior when given (batched
    arrays in, one value per row out).
    """
    if N < 1:
        raise ValidationError("N must be at least 1")
    t0 = time.perf_counter()
    states = [sample_pi0(pql, model, rng) for _ in range(N)]
    nu = np.array([s.nu for s in states])
    sigma_sq = np.array([s.sigma_sq for s in states]).reshape(N, model.L)
    target = (log_pi_batch(model, nu, sigma_sq) if log_target is None
              else np.asarray(log_target(nu, sigma_sq), dtype=float))
    lw = normalise(target - log_pi0_batch(model, pql, nu, sigma_sq))
    out = WeightedSample(np.hstack([nu, sigma_sq]), lw, _all_names(model),
                         time.perf_counter() - t0)
    if out.ess / N < DEGENERACY_RATIO:
        log.warning("importance sampler is degenerate: ESS %.1f of %d", out.ess, N)
    return out


def _check_iters(iters, burnin):
    if burnin < 0 or iters <= burnin:
        raise ValidationError(f"need iters > burnin >= 0, got iters={iters}, burnin={burnin}")


def rwmh_chains(model: ModelSpec, pql: PqlFit, move_config: MoveConfig, iters: int,
                burnin: int, rngs) -> list:
    """Independent RWMH chains, one per generator in ``rngs``, advanced in
    lockstep. Each iteration applies the SMC move kernel at ``gamma = 1``
    starting from the PQL estimates. Returns one :class:`ChainOutput` per
    chain."""
    _check_iters(iters, burnin)
    rngs = list(rngs)
    R = len(rngs)
    kernel = MoveKernel(model, pql, move_config)
    t0 = time.perf_counter()
    nu = np.tile(pql.nu_hat, (R, 1))
    sigma_sq = np.tile(pql.sigma_sq_hat, (R, 1))
    eta = nu @ model.C.T
    keep = iters - burnin
    out = np.empty((R, keep, model.P + model.L))
    acc = np.zeros((R, kernel.J))
    for t in range(iters):
        draws = [kernel.draw(r) for r in rngs]
        z = np.array([d[0] for d in draws])
        logu = np.array([d[1] for d in draws])
        g = np.array([d[2] for d in draws]).reshape(R, model.L)
        nu, sigma_sq, eta, a = kernel.apply(nu, sigma_sq, eta, 1.0, z, logu, g)
        acc += a
        if t >= burnin:
            out[:, t - burnin, : model.P] = nu
            out[:, t - burnin, model.P:] = sigma_sq
    secs = time.perf_counter() - t0
    names = _all_names(model)
    return [ChainOutput(out[r], acc[r] / iters, burnin, names, secs / R) for r in range(R)]


def rwmh_chain(model: ModelSpec, pql: PqlFit, move_config: MoveConfig, iters: int,
               burnin: int, rng: np.random.Generator) -> ChainOutput:
    return rwmh_chains(model, pql, move_config, iters, burnin, [rng])[0]


def slice_update(x0: float, logf, width: float, rng: np.random.Generator,
                 max_steps: int = 100, coordinate=None, logf0=None):
    """One stepping-out and shrinkage slice update of a scalar.

    Returns ``(x1, logf(x1))``. Raises :class:`BracketError` when either
    end of the bracket is still inside the slice after ``max_steps`` steps.
    """
    if not width > 0:
        raise ValidationError("slice width must be positive")
    f0 = logf(x0) if logf0 is None else logf0
    level = f0 - rng.standard_exponential()
    left = x0 - width * rng.random()
    right = left + width
    steps = 0
    while logf(left) >= level:
        steps += 1
        if steps > max_steps:
            raise BracketError(coordinate, max_steps)
        left -= width
    steps = 0
    while logf(right) >= level:
        steps += 1
        if steps > max_steps:
            raise BracketError(coordinate, max_steps)
        right += width
    while True:
        x1 = left + (right - left) * rng.random()
        f1 = logf(x1)
        if f1 >= level:
            return x1, f1
        if x1 < x0:
            left = x1
        else:
            right = x1
        if right - left <= 1e-14 * max(1.0, abs(x0)):
            return x0, f0


def slice_sampler(model: ModelSpec, pql: PqlFit, iters: int, burnin: int,
                  width_init: float = 1.0, rng: np.random.Generator | None = None,
                  max_steps: int = 100) -> ChainOutput:
    """Coordinate-wise slice sampler on the full conditionals of ``nu``
    followed by the Gibbs variance draws, started at the PQL estimates."""
    _check_iters(iters, burnin)
    if not width_init > 0:
        raise ValidationError("width_init must be positive")
    rng = rng if rng is not None else np.random.default_rng()
    t0 = time.perf_counter()
    fam = model.family
    y, C = model.y, model.C
    nu = pql.nu_hat.copy()
    sigma_sq = pql.sigma_sq_hat.copy()
    eta = C @ nu
    col_block = np.full(model.P, -1)
    for l, b in enumerate(model.blocks):
        col_block[b.slice] = l
    rows = [np.flatnonzero(C[:, j]) for j in range(model.P)]
    keep = iters - burnin
    out = np.empty((keep, model.P + model.L))
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(iters):
            for j in range(model.P):
                r = rows[j]
                c, yr, base = C[r, j], y[r], eta[r] - nu[j] * C[r, j]
                l = col_block[j]
                pv = model.sigma_beta_sq if l < 0 else sigma_sq[l]

                def logf(x, r=r, c=c, yr=yr, base=base, pv=pv):
                    e = base + x * c
                    return float(e @ yr - np.sum(cumulant(fam, e))) - 0.5 * x * x / pv

                x1, _ = slice_update(nu[j], logf, width_init, rng, max_steps, coordinate=j)
                eta[r] = base + x1 * c
                nu[j] = x1
            if model.L:
                g = rng.standard_gamma(model.gibbs_shape)
                sigma_sq = (model.A + 0.5 * block_sq_norms(model, nu)[0]) / g
            if t >= burnin:
                out[t - burnin, : model.P] = nu
                out[t - burnin, model.P:] = sigma_sq
    return ChainOutput(out, np.zeros(0), burnin, _all_names(model), time.perf_counter() - t0)


def default_chain_rng(seed: int, chain: int = 0) -> np.random.Generator:
    """Generator for replicate chain ``chain`` of a run seeded with ``seed``."""
    return numerics.substream(seed, numerics.STREAM_CHAIN, 0, chain)
