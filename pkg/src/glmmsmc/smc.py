"""Tempered sequential Monte Carlo sampler for GLMMs.

The sampler moves a population of weighted particles from the PQL-centred
initial density to the posterior through ``pi_s ~ pi0^(1-g_s) pi^g_s``.
Each stage reweights, resamples (stratified) when the effective sample size
drops below ``k N`` or on the first stage with ``g_s = 1``, then applies a
blocked random-walk Metropolis sweep over the coefficients followed by Gibbs
draws of the variance components.

Particles are processed in fixed-size chunks and every particle draws from
its own counter-based stream indexed by ``(seed, stage, particle)``, so the
output is bitwise identical for any number of worker threads.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics
from .errors import NumericError, ValidationError, WeightDegeneracyError
from .model import ModelSpec, block_sq_norms, cumulant, log_pi0_batch, log_pi_batch
from .pql import PqlFit, sample_pi0

log = logging.getLogger(__name__)

CHUNK = 128
TERMINAL_STAGES = 5


@dataclass(frozen=True)
class Schedule:
    gammas: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gammas, dtype=float)
        object.__setattr__(self, "gammas", g)
        if g.size < 2 or g[0] != 0.0 or g[-1] != 1.0 or np.any(np.diff(g) < 0):
            raise ValidationError("schedule must start at 0, end at 1 and be non-decreasing")

    @property
    def S(self) -> int:
        return self.gammas.size - 1

    @property
    def first_one(self) -> int:
        return int(np.argmax(self.gammas == 1.0))


def make_schedule(S: int) -> Schedule:
    """Linear schedule ``g_s = min(1, s / (S - 5))``: the last five stages all
    sit at ``g = 1``."""
    if S < TERMINAL_STAGES + 1:
        raise ValidationError(f"need S >= {TERMINAL_STAGES + 1} stages, got {S}")
    s = np.arange(S + 1)
    return Schedule(np.minimum(1.0, s / (S - TERMINAL_STAGES)))


@dataclass(frozen=True)
class MoveConfig:
    """Partition of the coefficient indices into update blocks, with one
    proposal-covariance multiplier per block.

    A multiplier of zero freezes its block (the proposal equals the current
    value); it is meant for testing.
    """

    partition: tuple
    tau: np.ndarray

    def __post_init__(self):
        parts = tuple(np.atleast_1d(np.asarray(I, dtype=int)) for I in self.partition)
        tau = np.broadcast_to(np.asarray(self.tau, dtype=float), (len(parts),)).copy()
        if any(I.size == 0 for I in parts):
            raise ValidationError("partition blocks must be non-empty")
        if np.any(tau < 0) or not np.all(np.isfinite(tau)):
            raise ValidationError("tau must be finite and non-negative")
        object.__setattr__(self, "partition", parts)
        object.__setattr__(self, "tau", tau)

    @property
    def J(self) -> int:
        return len(self.partition)

    def validate(self, P: int):
        allidx = np.concatenate(self.partition)
        if allidx.size != P or not np.array_equal(np.sort(allidx), np.arange(P)):
            raise ValidationError(f"partition must cover 0..{P - 1} exactly once")

    @staticmethod
    def default_tau(partition):
        return np.array([2.4 / np.sqrt(len(np.atleast_1d(I))) for I in partition])

    @classmethod
    def from_blocks(cls, partition, tau=None):
        parts = [np.atleast_1d(np.asarray(I, dtype=int)) for I in partition]
        return cls(tuple(parts), cls.default_tau(parts) if tau is None else tau)

    @classmethod
    def singleton(cls, P, tau=None):
        return cls.from_blocks([[j] for j in range(P)], tau)

    @classmethod
    def one_block(cls, P, tau=None):
        return cls.from_blocks([np.arange(P)], tau)

    @classmethod
    def by_class(cls, model: ModelSpec, tau_by_class: dict, grouped=False):
        """Per-column multipliers chosen by column class (``fixed``, ``random``
        or ``spline``). Singleton blocks unless ``grouped``, in which case each
        class forms a single block."""
        classes = model.column_class()
        if grouped:
            partition, tau = [], []
            for cls_name in ("fixed", "random", "spline"):
                idx = np.flatnonzero(classes == cls_name)
                if idx.size:
                    partition.append(idx)
                    tau.append(tau_by_class.get(cls_name, 2.4 / np.sqrt(idx.size)))
            return cls.from_blocks(partition, tau)
        tau = [tau_by_class.get(c, 2.4) for c in classes]
        return cls.singleton(model.P, tau)


@dataclass
class ParticleSystem:
    nu: np.ndarray  # (N, P)
    sigma_sq: np.ndarray  # (N, L)
    log_weights: np.ndarray  # (N,), normalised
    eta: np.ndarray  # (N, n) cached linear predictors C nu
    seed: int
    stage: int = 0

    @property
    def N(self) -> int:
        return self.nu.shape[0]

    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights - numerics.log_sum_exp(self.log_weights))

    def draws(self) -> np.ndarray:
        """``(N, P + L)`` matrix of coefficients followed by variances."""
        return np.hstack([self.nu, self.sigma_sq])

    def take(self, idx) -> "ParticleSystem":
        return replace(self, nu=self.nu[idx], sigma_sq=self.sigma_sq[idx],
                       eta=self.eta[idx], log_weights=self.log_weights[idx])


@dataclass
class RunTrace:
    gammas: np.ndarray
    ess: list = field(default_factory=list)
    resampled: list = field(default_factory=list)
    acceptance: list = field(default_factory=list)  # per stage, length J
    seconds: float = 0.0

    @property
    def resample_stages(self) -> list:
        return [s + 1 for s, r in enumerate(self.resampled) if r]

    @property
    def acceptance_matrix(self) -> np.ndarray:
        """``J x S`` acceptance rates."""
        return np.array(self.acceptance).T

    def to_dict(self):
        return {
            "gammas": self.gammas.tolist(),
            "ess": [float(e) for e in self.ess],
            "resample_stages": self.resample_stages,
            "acceptance": self.acceptance_matrix.tolist(),
            "mean_acceptance": np.mean(self.acceptance, axis=0).tolist() if self.acceptance else [],
            "seconds": self.seconds,
        }


def ess(log_weights) -> float:
    """``(sum w)^2 / sum w^2`` computed from log weights."""
    lw = np.asarray(log_weights, dtype=float)
    if lw.size == 0 or not np.any(np.isfinite(lw)):
        raise WeightDegeneracyError("no finite weights")
    val = np.exp(2.0 * numerics.log_sum_exp(lw) - numerics.log_sum_exp(2.0 * lw))
    return float(np.clip(val, 1.0, lw.size))


def normalise(log_weights) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=float)
    if np.any(np.isnan(lw)):
        raise WeightDegeneracyError("NaN log weight")
    total = numerics.log_sum_exp(lw)
    if total == -np.inf:
        raise WeightDegeneracyError("every particle weight is zero")
    if not np.isfinite(total):
        raise WeightDegeneracyError("infinite particle weight")
    return lw - total


def stratified_resample(log_weights, rng: np.random.Generator) -> np.ndarray:
    """Ancestor indices from one uniform draw in each of ``N`` equal strata
    of the weight CDF. Output is sorted."""
    lw = normalise(log_weights)
    N = lw.size
    cw = np.cumsum(np.exp(lw))
    cw /= cw[-1]
    u = (np.arange(N) + rng.random(N)) / N
    return np.searchsorted(cw, u, side="right")


def log_ratio_batch(model, pql, nu, sigma_sq, eta) -> np.ndarray:
    """``log pi - log pi0`` per particle."""
    return log_pi_batch(model, nu, sigma_sq, eta) - log_pi0_batch(model, pql, nu, sigma_sq)


def reweight(system: ParticleSystem, delta_gamma: float, model: ModelSpec,
             pql: PqlFit) -> ParticleSystem:
    if delta_gamma < 0:
        raise ValidationError("delta_gamma must be non-negative")
    if delta_gamma == 0:
        return system
    incr = log_ratio_batch(model, pql, system.nu, system.sigma_sq, system.eta)
    if np.any(np.isnan(incr)):
        raise NumericError("NaN target density at a particle")
    lw = system.log_weights + delta_gamma * incr
    return replace(system, log_weights=normalise(lw))


# --------------------------------------------------------------------- moves


def draw_move_randoms(rng: np.random.Generator, P: int, J: int, gibbs_shape):
    """Random numbers one particle consumes in one move sweep: ``P`` normals
    for the proposals, ``J`` log-uniforms for the accept tests and one
    unit-rate gamma per variance component."""
    z = rng.standard_normal(P)
    logu = np.log(rng.random(J))
    g = rng.standard_gamma(gibbs_shape) if len(gibbs_shape) else np.zeros(0)
    return z, logu, g


@dataclass
class _Block:
    idx: np.ndarray
    chol: np.ndarray  # factor of tau * Sigma_I
    rows: object  # slice or index array of rows where C[:, idx] != 0
    C_rows: np.ndarray  # (k, |I|)
    y_rows: np.ndarray
    fixed_pos: np.ndarray
    groups: list  # [(l, positions within idx)]
    Q_II: np.ndarray
    Q_rows: np.ndarray  # (|I|, P)


class MoveKernel:
    """Blocked random-walk Metropolis sweep plus Gibbs variance draws,
    leaving ``pi_s`` invariant. Shared by the SMC sampler and the RWMH
    baseline."""

    def __init__(self, model: ModelSpec, pql: PqlFit, move_config: MoveConfig):
        move_config.validate(model.P)
        self.model = model
        self.pql = pql
        self.config = move_config
        C = model.C
        col_block = np.full(model.P, -1)
        for l, b in enumerate(model.blocks):
            col_block[b.slice] = l
        self.blocks = []
        for I, tau in zip(move_config.partition, move_config.tau):
            if tau > 0:
                chol = numerics.cholesky(tau * pql.block_cov(I)).lower
            else:
                chol = np.zeros((I.size, I.size))
            nz = np.flatnonzero(np.any(C[:, I] != 0, axis=1))
            rows = slice(None) if nz.size == model.n else nz
            groups = []
            for l in np.unique(col_block[I]):
                if l >= 0:
                    groups.append((int(l), np.flatnonzero(col_block[I] == l)))
            self.blocks.append(_Block(
                idx=I, chol=chol, rows=rows, C_rows=C[rows][:, I], y_rows=model.y[rows],
                fixed_pos=np.flatnonzero(I < model.q_beta), groups=groups,
                Q_II=pql.precision[np.ix_(I, I)], Q_rows=pql.precision[I, :],
            ))

    @property
    def J(self) -> int:
        return len(self.blocks)

    def draw(self, rng):
        return draw_move_randoms(rng, self.model.P, self.J, self.model.gibbs_shape)

    def apply(self, nu, sigma_sq, eta, gamma, z, logu, g):
        """One sweep for ``m`` independent states at once.

        ``z`` is ``(m, P)``, ``logu`` ``(m, J)`` and ``g`` ``(m, L)``. Returns
        new ``(nu, sigma_sq, eta)`` and an ``(m, J)`` boolean acceptance array.
        """
        model, pql = self.model, self.pql
        nu = nu.copy()
        eta = eta.copy()
        m = nu.shape[0]
        fam = model.family
        Qd = (nu - pql.nu_hat) @ pql.precision
        unorm2 = block_sq_norms(model, nu)
        shape = model.gibbs_shape
        accepted = np.zeros((m, self.J), dtype=bool)
        w_lik = gamma
        w_init = 1.0 - gamma
        with np.errstate(over="ignore", invalid="ignore"):
            for j, blk in enumerate(self.blocks):
                I = blk.idx
                delta = z[:, I] @ blk.chol.T
                old = nu[:, I]
                new = old + delta
                eta_old = eta[:, blk.rows]
                deta = delta @ blk.C_rows.T
                eta_new = eta_old + deta
                logr = np.zeros(m)
                if w_lik > 0:
                    dll = deta @ blk.y_rows - (np.sum(cumulant(fam, eta_new), axis=1)
                                               - np.sum(cumulant(fam, eta_old), axis=1))
                    if blk.fixed_pos.size:
                        fp = blk.fixed_pos
                        dll -= np.sum(new[:, fp] ** 2 - old[:, fp] ** 2, axis=1) / (
                            2.0 * model.sigma_beta_sq)
                    logr += w_lik * dll
                un_new = unorm2.copy()
                if blk.groups:
                    tempered = np.zeros(m)
                    for l, pos in blk.groups:
                        du2 = np.sum(new[:, pos] ** 2 - old[:, pos] ** 2, axis=1)
                        un_new[:, l] += du2
                        logr -= 0.5 * du2 / sigma_sq[:, l]
                        tempered += shape[l] * (np.log(model.A[l] + 0.5 * un_new[:, l])
                                                - np.log(model.A[l] + 0.5 * unorm2[:, l]))
                    if w_init > 0:
                        logr += w_init * tempered
                if w_init > 0:
                    dquad = 2.0 * np.sum(delta * Qd[:, I], axis=1) + np.einsum(
                        "mi,ij,mj->m", delta, blk.Q_II, delta)
                    logr -= 0.5 * w_init * dquad
                acc = logu[:, j] < logr
                accepted[:, j] = acc
                if not acc.any():
                    continue
                nu[:, I] = np.where(acc[:, None], new, old)
                eta[:, blk.rows] = np.where(acc[:, None], eta_new, eta_old)
                Qd += np.where(acc[:, None], delta, 0.0) @ blk.Q_rows
                unorm2 = np.where(acc[:, None], un_new, unorm2)
        if model.L:
            sigma_sq = (model.A + 0.5 * unorm2) / g
        return nu, sigma_sq, eta, accepted


def _chunks(N):
    return [slice(a, min(a + CHUNK, N)) for a in range(0, N, CHUNK)]


def _map_chunks(fn, N, workers):
    chunks = _chunks(N)
    if workers <= 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def linear_predictors(model: ModelSpec, nu, workers=1) -> np.ndarray:
    nu = np.atleast_2d(nu)
    parts = _map_chunks(lambda c: nu[c] @ model.C.T, nu.shape[0], workers)
    return np.vstack(parts)


def move_step(system: ParticleSystem, stage_gamma: float, model: ModelSpec, pql: PqlFit,
              move_config: MoveConfig | None = None, kernel: MoveKernel | None = None,
              workers: int = 1):
    """Apply one blocked-MH-plus-Gibbs sweep at ``stage_gamma`` to every
    particle. Weights are untouched. Returns ``(system, accept_counts)`` with
    one count per block."""
    if kernel is None:
        kernel = MoveKernel(model, pql, move_config or MoveConfig.singleton(model.P))
    seed, stage = system.seed, system.stage

    def work(c):
        idx = range(c.start, c.stop)
        draws = [kernel.draw(numerics.substream(seed, numerics.STREAM_MOVE, stage, i)) for i in idx]
        z = np.array([d[0] for d in draws])
        logu = np.array([d[1] for d in draws])
        g = np.array([d[2] for d in draws])
        return kernel.apply(system.nu[c], system.sigma_sq[c], system.eta[c], stage_gamma, z, logu, g)

    parts = _map_chunks(work, system.N, workers)
    nu = np.vstack([p[0] for p in parts])
    sigma_sq = np.vstack([p[1] for p in parts])
    eta = np.vstack([p[2] for p in parts])
    counts = np.sum(np.vstack([p[3] for p in parts]), axis=0)
    return replace(system, nu=nu, sigma_sq=sigma_sq, eta=eta), counts


def initialise(model: ModelSpec, pql: PqlFit, N: int, seed: int, workers: int = 1) -> ParticleSystem:
    """``N`` particles from the initial density with equal weights."""
    states = [sample_pi0(pql, model, numerics.substream(seed, numerics.STREAM_INIT, 0, i))
              for i in range(N)]
    nu = np.array([s.nu for s in states])
    sigma_sq = np.array([s.sigma_sq for s in states]).reshape(N, model.L)
    eta = linear_predictors(model, nu, workers)
    return ParticleSystem(nu, sigma_sq, np.full(N, -np.log(N)), eta, seed, 0)


@dataclass
class SmcConfig:
    n_particles: int = 1000
    n_stages: int = 105
    resample_threshold: float = 0.5
    move_config: MoveConfig | None = None
    seed: int = 0
    workers: int = 1
    force_final_resample: bool = True
    schedule: Schedule | None = None


def run(model: ModelSpec, pql: PqlFit, config: SmcConfig, progress=None):
    """Run the full sampler. Returns ``(final ParticleSystem, RunTrace)``.

    With ``force_final_resample`` (the default) the population is resampled
    on the first stage with ``g_s = 1`` and the final weights are uniform.
    """
    N = config.n_particles
    if N < 2:
        raise ValidationError("need at least two particles")
    if not 0 <= config.resample_threshold <= 1:
        raise ValidationError("resample threshold must lie in [0, 1]")
    schedule = config.schedule or make_schedule(config.n_stages)
    move_config = config.move_config or MoveConfig.singleton(model.P)
    kernel = MoveKernel(model, pql, move_config)
    t0 = time.perf_counter()

    system = initialise(model, pql, N, config.seed, config.workers)
    trace = RunTrace(schedule.gammas)
    first_one = schedule.first_one
    g = schedule.gammas
    for s in range(1, schedule.S + 1):
        system.stage = s
        system = reweight(system, g[s] - g[s - 1], model, pql)
        e = ess(system.log_weights)
        trace.ess.append(e)
        do_resample = e < config.resample_threshold * N or (
            config.force_final_resample and s == first_one)
        trace.resampled.append(bool(do_resample))
        if do_resample:
            idx = stratified_resample(
                system.log_weights, numerics.substream(config.seed, numerics.STREAM_RESAMPLE, s))
            system = system.take(idx)
            system.log_weights = np.full(N, -np.log(N))
        system, counts = move_step(system, g[s], model, pql, kernel=kernel, workers=config.workers)
        trace.acceptance.append(counts / N)
        if progress is not None:
            progress(s, e, do_resample)
    if not np.all(np.isfinite(system.eta)):
        raise NumericError("non-finite linear predictor in the final population")
    trace.seconds = time.perf_counter() - t0
    return system, trace
