"""GLMM target density, the PQL-centred initial density and the tempered
bridge between them. All densities are unnormalised and live in log space.

Batched ``*_batch`` variants take coefficient matrices of shape ``(m, P)``
and variance matrices of shape ``(m, L)``; they are what the samplers use.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit

from .errors import ValidationError


class Family(enum.Enum):
    POISSON = "poisson"
    BERNOULLI_LOGIT = "logit"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).lower()
        aliases = {"poisson": cls.POISSON, "logit": cls.BERNOULLI_LOGIT,
                   "logistic": cls.BERNOULLI_LOGIT, "bernoulli": cls.BERNOULLI_LOGIT,
                   "binomial": cls.BERNOULLI_LOGIT}
        if key not in aliases:
            raise ValidationError(f"unknown family {value!r}")
        return aliases[key]


def cumulant(family: Family, x, order: int = 0):
    """Cumulant function ``b`` of the family (``order`` 0) or its first two
    derivatives. Works elementwise on arrays."""
    if order not in (0, 1, 2):
        raise ValidationError(f"cumulant order must be 0, 1 or 2, got {order}")
    x = np.asarray(x, dtype=float)
    if family is Family.POISSON:
        with np.errstate(over="ignore"):
            out = np.exp(x)
    elif family is Family.BERNOULLI_LOGIT:
        if order == 0:
            # log1p(e^x) for x <= 0, x + log1p(e^-x) for x > 0
            out = np.logaddexp(0.0, x)
        else:
            p = expit(x)
            # expit(x) expit(-x) keeps b'' > 0 far into the tails
            out = p if order == 1 else p * expit(-x)
    else:  # pragma: no cover
        raise ValidationError(f"unsupported family {family}")
    return out if out.ndim else float(out)


def canonical_link(family: Family, mean):
    """Inverse of ``b'``."""
    mean = np.asarray(mean, dtype=float)
    if family is Family.POISSON:
        return np.log(mean)
    return np.log(mean) - np.log1p(-mean)


@dataclass(frozen=True)
class RandomBlock:
    """Contiguous column range of ``C`` holding one variance component."""

    name: str
    offset: int
    size: int
    kind: str = "random"  # "random" (grouping intercepts) or "spline"

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)


@dataclass(frozen=True)
class ModelSpec:
    y: np.ndarray
    C: np.ndarray
    q_beta: int
    blocks: tuple = ()
    sigma_beta_sq: float = 1e8
    A: np.ndarray = field(default_factory=lambda: np.zeros(0))
    family: Family = Family.POISSON
    names: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        C = np.asarray(self.C, dtype=float)
        blocks = tuple(self.blocks)
        A = np.broadcast_to(np.asarray(self.A, dtype=float), (len(blocks),)).copy()
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "family", Family.parse(self.family))

        if C.ndim != 2 or y.ndim != 1 or C.shape[0] != y.shape[0]:
            raise ValidationError(f"y has shape {y.shape} but C has shape {C.shape}")
        if not np.all(np.isfinite(C)):
            raise ValidationError("design matrix contains non-finite entries")
        if self.q_beta < 0:
            raise ValidationError("q_beta must be non-negative")
        pos = self.q_beta
        for b in blocks:
            if b.offset != pos or b.size < 1:
                raise ValidationError(
                    f"random block {b.name!r} must start at column {pos} and be non-empty"
                )
            pos += b.size
        if pos != C.shape[1]:
            raise ValidationError(
                f"q_beta + block sizes = {pos} but C has {C.shape[1]} columns"
            )
        if not self.sigma_beta_sq > 0:
            raise ValidationError("sigma_beta_sq must be positive")
        if np.any(A <= 0):
            raise ValidationError("every A hyperparameter must be positive")

        if self.family is Family.POISSON:
            if np.any(y < 0) or np.any(y != np.round(y)):
                raise ValidationError("Poisson responses must be non-negative integers")
        elif not np.all((y == 0) | (y == 1)):
            raise ValidationError("Bernoulli responses must be 0 or 1")

        if self.names and len(self.names) != C.shape[1]:
            raise ValidationError("names must label every column of C")
        if not self.names:
            object.__setattr__(self, "names", tuple(f"nu[{j}]" for j in range(C.shape[1])))

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @property
    def P(self) -> int:
        return self.C.shape[1]

    @property
    def L(self) -> int:
        return len(self.blocks)

    @property
    def q(self) -> np.ndarray:
        return np.array([b.size for b in self.blocks], dtype=float)

    @property
    def gibbs_shape(self) -> np.ndarray:
        """Shape of the inverse-gamma full conditional of each variance."""
        return self.A + self.q / 2.0

    def prior_var_diag(self, sigma_sq) -> np.ndarray:
        """Diagonal of ``V = blockdiag(sigma_beta^2 I, sigma_1^2 I, ...)``."""
        sigma_sq = np.asarray(sigma_sq, dtype=float)
        v = np.full(self.P, float(self.sigma_beta_sq))
        for b, s in zip(self.blocks, sigma_sq):
            v[b.slice] = s
        return v

    def variance_names(self) -> tuple:
        return tuple(f"sigma_sq.{b.name}" for b in self.blocks)

    def column_class(self) -> np.ndarray:
        """Per-column class label: ``fixed``, ``random`` or ``spline``."""
        out = np.array(["fixed"] * self.P, dtype=object)
        for b in self.blocks:
            out[b.slice] = b.kind
        return out


@dataclass(frozen=True)
class ParamState:
    nu: np.ndarray
    sigma_sq: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nu", np.asarray(self.nu, dtype=float))
        object.__setattr__(self, "sigma_sq", np.atleast_1d(np.asarray(self.sigma_sq, dtype=float)))


def _as_batch(model, nu, sigma_sq):
    nu = np.atleast_2d(np.asarray(nu, dtype=float))
    sigma_sq = np.asarray(sigma_sq, dtype=float).reshape(nu.shape[0], model.L)
    if nu.shape[1] != model.P:
        raise ValidationError(f"coefficient vector has length {nu.shape[1]}, model has {model.P}")
    if np.any(sigma_sq <= 0):
        raise ValidationError("variance components must be strictly positive")
    return nu, sigma_sq


def block_sq_norms(model: ModelSpec, nu) -> np.ndarray:
    """``||u_l||^2`` for every block, shape ``(m, L)``."""
    nu = np.atleast_2d(nu)
    out = np.empty((nu.shape[0], model.L))
    for l, b in enumerate(model.blocks):
        out[:, l] = np.sum(nu[:, b.slice] ** 2, axis=1)
    return out


def loglik_batch(model: ModelSpec, eta) -> np.ndarray:
    """``y'eta - 1'b(eta)`` per row of ``eta``."""
    eta = np.atleast_2d(eta)
    with np.errstate(over="ignore", invalid="ignore"):
        return eta @ model.y - np.sum(cumulant(model.family, eta), axis=1)


def _variance_terms(model, unorm2, sigma_sq):
    if model.L == 0:
        return np.zeros(unorm2.shape[0])
    shape = model.gibbs_shape
    return -np.sum((shape + 1.0) * np.log(sigma_sq)
                   + (model.A + 0.5 * unorm2) / sigma_sq, axis=1)


def log_pi_batch(model: ModelSpec, nu, sigma_sq, eta=None) -> np.ndarray:
    nu, sigma_sq = _as_batch(model, nu, sigma_sq)
    if eta is None:
        eta = nu @ model.C.T
    beta = nu[:, : model.q_beta]
    unorm2 = block_sq_norms(model, nu)
    return (loglik_batch(model, eta)
            - np.sum(beta**2, axis=1) / (2.0 * model.sigma_beta_sq)
            + _variance_terms(model, unorm2, sigma_sq))


def pi0_quadratic(pql, nu) -> np.ndarray:
    """``(nu - nu_hat)' Sigma^{-1} (nu - nu_hat)`` per row."""
    d = np.atleast_2d(nu) - pql.nu_hat
    w = linalg.solve_triangular(pql.Sigma_chol.lower, d.T, lower=True)
    return np.sum(w**2, axis=0)


def log_pi0_batch(model: ModelSpec, pql, nu, sigma_sq) -> np.ndarray:
    nu, sigma_sq = _as_batch(model, nu, sigma_sq)
    unorm2 = block_sq_norms(model, nu)
    out = -0.5 * pi0_quadratic(pql, nu) + _variance_terms(model, unorm2, sigma_sq)
    if model.L:
        out += np.sum(model.gibbs_shape * np.log(model.A + 0.5 * unorm2), axis=1)
    return out


def log_pi_s_batch(model, pql, nu, sigma_sq, gamma, eta=None) -> np.ndarray:
    if not 0.0 <= gamma <= 1.0:
        raise ValidationError(f"gamma must lie in [0, 1], got {gamma}")
    if gamma == 1.0:
        return log_pi_batch(model, nu, sigma_sq, eta)
    if gamma == 0.0:
        return log_pi0_batch(model, pql, nu, sigma_sq)
    return (gamma * log_pi_batch(model, nu, sigma_sq, eta)
            + (1.0 - gamma) * log_pi0_batch(model, pql, nu, sigma_sq))


def log_pi(model: ModelSpec, state: ParamState) -> float:
    """Log of the unnormalised posterior of ``(nu, sigma^2)``."""
    return float(log_pi_batch(model, state.nu, state.sigma_sq)[0])


def log_pi0(model: ModelSpec, pql, state: ParamState) -> float:
    """Log of the unnormalised initial density: Gaussian in ``nu`` around the
    PQL fit, conditionally inverse-gamma in each variance."""
    return float(log_pi0_batch(model, pql, state.nu, state.sigma_sq)[0])


def log_pi_s(model: ModelSpec, pql, state: ParamState, gamma: float) -> float:
    """Geometric bridge ``gamma * log_pi + (1 - gamma) * log_pi0``."""
    return float(log_pi_s_batch(model, pql, state.nu, state.sigma_sq, gamma)[0])


def neg_hessian_nu(model: ModelSpec, nu, V_diag) -> np.ndarray:
    """``C' diag(b''(C nu)) C + V^{-1}``, the negated Hessian of the
    log-likelihood-plus-Gaussian-prior in ``nu``."""
    nu = np.asarray(nu, dtype=float)
    V_diag = np.asarray(V_diag, dtype=float)
    if nu.shape != (model.P,) or V_diag.shape != (model.P,):
        raise ValidationError("nu and V_diag must both have length P")
    if np.any(V_diag <= 0):
        raise ValidationError("prior variances must be positive")
    w = cumulant(model.family, model.C @ nu, order=2)
    H = (model.C * w[:, None]).T @ model.C
    H[np.diag_indices_from(H)] += 1.0 / V_diag
    return 0.5 * (H + H.T)
