"""Penalised quasi-likelihood fit used to centre and shape the initial
distribution of the sampler."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import numerics
from .errors import NotPositiveDefinite, ValidationError
from .model import (Family, ModelSpec, ParamState, block_sq_norms, canonical_link, cumulant,
                    neg_hessian_nu)

log = logging.getLogger(__name__)

SIGMA_SQ_FLOOR = 1e-6
ETA_CLAMP = 30.0


@dataclass(frozen=True)
class PqlFit:
    nu_hat: np.ndarray
    sigma_sq_hat: np.ndarray
    Sigma: np.ndarray
    Sigma_chol: numerics.CholeskyFactor
    precision: np.ndarray
    block_cond_covs: dict = field(default_factory=dict, repr=False)
    converged: bool = True
    iterations: int = 0

    def block_cov(self, block) -> np.ndarray:
        """Conditional covariance of ``nu[block]`` given the rest under the
        Gaussian part of the initial density."""
        key = tuple(int(i) for i in np.atleast_1d(block))
        if key in self.block_cond_covs:
            return self.block_cond_covs[key][0]
        return numerics.conditional_gaussian_cov(self.Sigma, key, precision=self.precision)


def _conditional_covs(Sigma, precision, partition):
    out = {}
    for block in partition:
        key = tuple(int(i) for i in np.atleast_1d(block))
        cov = numerics.conditional_gaussian_cov(Sigma, key, precision=precision)
        out[key] = (cov, numerics.cholesky(cov))
    return out


def fit_from_estimates(model: ModelSpec, nu_hat, sigma_sq_hat, partition=None,
                       inflate: float = 1.0, converged=True, iterations=0) -> PqlFit:
    """Build the Gaussian covariance and per-block conditional covariances
    around given point estimates (bypassing the IRLS iterations)."""
    nu_hat = np.asarray(nu_hat, dtype=float)
    sigma_sq_hat = np.maximum(np.atleast_1d(np.asarray(sigma_sq_hat, dtype=float)), SIGMA_SQ_FLOOR)
    if nu_hat.shape != (model.P,) or sigma_sq_hat.shape != (model.L,):
        raise ValidationError("initial estimates do not match the model dimensions")
    if not inflate > 0:
        raise ValidationError("inflate must be positive")
    H = neg_hessian_nu(model, nu_hat, model.prior_var_diag(sigma_sq_hat))
    Hf = numerics.cholesky(H)
    Sigma = linalg.cho_solve((Hf.lower, True), np.eye(model.P)) * inflate
    Sigma = 0.5 * (Sigma + Sigma.T)
    chol = numerics.cholesky(Sigma)
    precision = H / inflate
    if partition is None:
        partition = [[j] for j in range(model.P)]
    covs = _conditional_covs(Sigma, precision, partition)
    return PqlFit(nu_hat, sigma_sq_hat, Sigma, chol, precision, covs, converged, iterations)


def _initial_nu(model):
    nu = np.zeros(model.P)
    if model.q_beta and np.allclose(model.C[:, 0], 1.0):
        n = model.n
        ybar = float(np.mean(model.y))
        if model.family is Family.POISSON:
            ybar = max(ybar, 1.0 / (n + 1))
        else:
            ybar = min(max(ybar, 1.0 / (n + 1)), n / (n + 1.0))
        nu[0] = canonical_link(model.family, ybar)
    return nu


def _rel_change(new, old):
    if new.size == 0:
        return 0.0
    return float(np.max(np.abs(new - old) / (np.abs(old) + 1e-8)))


def pql_fit(model: ModelSpec, max_outer: int = 50, tol: float = 1e-6, partition=None,
            inflate: float = 1.0) -> PqlFit:
    """Penalised quasi-likelihood fit by IRLS on the working response with
    EM-style variance updates.

    Each outer iteration forms ``z = eta + (y - b'(eta)) / b''(eta)`` and
    ``W = diag(b''(eta))``, solves ``(C'WC + V^{-1}) nu = C'Wz`` and sets
    ``sigma_l^2 = (||u_l||^2 + tr(H_ll)) / q_l`` where ``H`` is the inverse
    of the penalised information. Non-convergence is reported through
    ``PqlFit.converged`` rather than raised.
    """
    if max_outer < 1:
        raise ValidationError("max_outer must be at least 1")
    nu = _initial_nu(model)
    sigma_sq = np.ones(model.L)
    converged = False
    it = 0
    for it in range(1, max_outer + 1):
        H, rhs = _working_system(model, nu, sigma_sq)
        try:
            cf = linalg.cho_factor(H, lower=True)
        except linalg.LinAlgError as exc:
            raise NotPositiveDefinite("penalised information matrix is singular") from exc
        nu_new = linalg.cho_solve(cf, rhs)
        if model.L:
            Hinv = linalg.cho_solve(cf, np.eye(model.P))
            diag = np.diag(Hinv)
            unorm2 = block_sq_norms(model, nu_new)[0]
            tr = np.array([diag[b.slice].sum() for b in model.blocks])
            sigma_new = np.maximum((unorm2 + tr) / model.q, SIGMA_SQ_FLOOR)
        else:
            sigma_new = sigma_sq
        change = max(_rel_change(nu_new, nu), _rel_change(sigma_new, sigma_sq))
        nu, sigma_sq = nu_new, sigma_new
        if not np.all(np.isfinite(nu)):
            raise NotPositiveDefinite("PQL iterations diverged")
        if change < tol:
            converged = True
            break
    if not converged:
        log.warning("PQL did not converge in %d iterations", max_outer)
    return fit_from_estimates(model, nu, sigma_sq, partition, inflate, converged, it)


def _working_system(model, nu, sigma_sq):
    eta = np.clip(model.C @ nu, -ETA_CLAMP, ETA_CLAMP)
    w = cumulant(model.family, eta, 2)
    z = eta + (model.y - cumulant(model.family, eta, 1)) / w
    H = (model.C * w[:, None]).T @ model.C
    H[np.diag_indices_from(H)] += 1.0 / model.prior_var_diag(sigma_sq)
    return H, model.C.T @ (w * z)


def irls_step(model: ModelSpec, nu, sigma_sq) -> np.ndarray:
    """One penalised IRLS update of ``nu`` at fixed variances."""
    H, rhs = _working_system(model, nu, sigma_sq)
    return linalg.solve(H, rhs, assume_a="pos")


def sample_pi0(pql: PqlFit, model: ModelSpec, rng: np.random.Generator) -> ParamState:
    """Draw ``nu ~ N(nu_hat, Sigma)`` then each ``sigma_l^2`` from its
    inverse-gamma conditional given ``u_l``."""
    nu = numerics.sample_mvn(pql.nu_hat, pql.Sigma_chol, rng)
    sigma_sq = np.empty(model.L)
    for l, b in enumerate(model.blocks):
        rate = model.A[l] + 0.5 * float(np.sum(nu[b.slice] ** 2))
        sigma_sq[l] = numerics.sample_inverse_gamma(model.gibbs_shape[l], rate, rng)
    return ParamState(nu, sigma_sq)
