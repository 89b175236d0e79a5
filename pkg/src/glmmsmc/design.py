"""Design matrix construction: standardisation, knots, the radial cubic
spline basis and assembly of ``C = [X Z]`` with its block structure."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .model import RandomBlock

log = logging.getLogger(__name__)

EIG_RTOL = 1e-10


@dataclass(frozen=True)
class Standardisation:
    mean: float
    sd: float

    @classmethod
    def fit(cls, x):
        x = np.asarray(x, dtype=float)
        sd = float(np.std(x))  # population sd (divisor n)
        if not sd > 0:
            raise ValidationError("cannot standardise a constant predictor")
        return cls(float(np.mean(x)), sd)

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.sd

    def invert(self, z):
        return np.asarray(z, dtype=float) * self.sd + self.mean


def select_knots(x, K: int) -> np.ndarray:
    """Knots at the ``(k+1)/(K+2)`` quantiles (k = 1..K) of the unique values
    of ``x``, linearly interpolating between order statistics."""
    if K < 2:
        raise ValidationError(f"need at least 2 knots, got K={K}")
    ux = np.unique(np.asarray(x, dtype=float))
    if ux.size < 2:
        raise ValidationError("knot selection needs at least two distinct predictor values")
    if ux.size < K + 2:
        log.warning("only %d unique predictor values for %d knots", ux.size, K)
    levels = (np.arange(1, K + 1) + 1.0) / (K + 2.0)
    return np.quantile(ux, levels, method="linear")


def _omega_inv_sqrt(knots):
    omega = np.abs(knots[:, None] - knots[None, :]) ** 3
    lam, U = np.linalg.eigh(omega)
    keep = np.abs(lam) >= EIG_RTOL * np.max(np.abs(lam))
    scale = np.zeros_like(lam)
    scale[keep] = np.abs(lam[keep]) ** -0.5
    out = (U * scale) @ U.T
    return 0.5 * (out + out.T)


@dataclass(frozen=True)
class SplineBasisSpec:
    knots: np.ndarray
    omega_inv_sqrt: np.ndarray = field(repr=False)

    @property
    def K(self) -> int:
        return self.knots.size

    @classmethod
    def from_knots(cls, knots):
        knots = np.asarray(knots, dtype=float)
        if knots.ndim != 1 or knots.size < 2:
            raise ValidationError("need at least two knots")
        if np.any(np.diff(knots) <= 0):
            raise ValidationError("knots must be strictly increasing")
        return cls(knots, _omega_inv_sqrt(knots))

    @classmethod
    def from_data(cls, x, K):
        return cls.from_knots(select_knots(x, K))


def radial_cubic_basis(x, spec: SplineBasisSpec) -> np.ndarray:
    """``Z = [|x_i - kappa_k|^3] @ Omega^{-1/2}`` with the inverse square root
    taken over eigenvalue magnitudes (Omega is only conditionally p.d.)."""
    x = np.asarray(x, dtype=float)
    R = np.abs(x[:, None] - spec.knots[None, :]) ** 3
    return R @ spec.omega_inv_sqrt


def assemble_design(fixed_columns, random_blocks=(), intercept=False, block_names=None,
                    block_kinds=None):
    """Concatenate fixed-effect columns and random-effect blocks into ``C``.

    Returns ``(C, blocks, q_beta)`` where ``blocks`` holds one
    :class:`RandomBlock` per entry of ``random_blocks``.
    """
    X = np.asarray(fixed_columns, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if intercept:
        X = np.column_stack([np.ones(n), X])
    parts = [X]
    blocks = []
    offset = X.shape[1]
    for j, Z in enumerate(random_blocks):
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        if Z.shape[0] != n:
            raise ValidationError(
                f"random block {j} has {Z.shape[0]} rows, fixed part has {n}"
            )
        name = block_names[j] if block_names else f"u{j + 1}"
        kind = block_kinds[j] if block_kinds else "random"
        blocks.append(RandomBlock(name, offset, Z.shape[1], kind))
        parts.append(Z)
        offset += Z.shape[1]
    return np.hstack(parts), blocks, X.shape[1]


@dataclass(frozen=True)
class SplineTerm:
    column: str
    fixed_index: int  # column of C holding the linear term
    block_index: int  # which RandomBlock holds the basis coefficients
    standardisation: Standardisation
    basis: SplineBasisSpec


@dataclass
class Design:
    """Everything needed to rebuild rows of ``C`` from raw predictor values."""

    C: np.ndarray
    y: np.ndarray
    q_beta: int
    blocks: list
    names: list
    standardisations: dict
    splines: list
    column_means: np.ndarray  # mean of every fixed column over the data

    def to_dict(self):
        return {
            "names": list(self.names),
            "q_beta": self.q_beta,
            "blocks": [vars(b) for b in self.blocks],
            "standardisations": {k: vars(v) for k, v in self.standardisations.items()},
            "splines": [
                {"column": s.column, "knots_std": s.basis.knots.tolist(),
                 "fixed_index": s.fixed_index, "block_index": s.block_index}
                for s in self.splines
            ],
        }


PREDICTOR_ROLES = ("continuous", "binary", "categorical")


def design_from_frame(frame, response, predictors, splines=(), random_intercepts=(),
                      intercept=True) -> Design:
    """Build a :class:`Design` from a pandas data frame.

    ``predictors`` maps column names to a role in :data:`PREDICTOR_ROLES`;
    ``splines`` is a sequence of ``{"column": name, "K": count}``;
    ``random_intercepts`` names grouping columns. Continuous predictors are
    standardised (population sd); a spline predictor that is not already a
    fixed predictor gets its linear term added as a continuous one.
    """
    if response not in frame.columns:
        raise ValidationError(f"response column {response!r} not in data")
    n = len(frame)
    predictors = dict(predictors)
    for sp in splines:
        if sp["column"] not in predictors:
            predictors[sp["column"]] = "continuous"

    cols, names, stds = [], [], {}
    if intercept:
        cols.append(np.ones(n))
        names.append("(Intercept)")
    for name, role in predictors.items():
        if name not in frame.columns:
            raise ValidationError(f"predictor column {name!r} not in data")
        raw = frame[name]
        if role == "continuous":
            st = Standardisation.fit(raw.to_numpy(dtype=float))
            stds[name] = st
            cols.append(st.apply(raw.to_numpy(dtype=float)))
            names.append(name)
        elif role == "binary":
            v = raw.to_numpy(dtype=float)
            if not np.all((v == 0) | (v == 1)):
                raise ValidationError(f"binary predictor {name!r} has values other than 0/1")
            cols.append(v)
            names.append(name)
        elif role == "categorical":
            levels = sorted(raw.unique(), key=str)
            for lev in levels[1:]:
                cols.append((raw == lev).to_numpy(dtype=float))
                names.append(f"{name}[{lev}]")
        else:
            raise ValidationError(f"unknown predictor role {role!r} for {name!r}")
    q_beta = len(cols)
    X = np.column_stack(cols) if cols else np.zeros((n, 0))

    Zs, bnames, bkinds = [], [], []
    for g in random_intercepts:
        if g not in frame.columns:
            raise ValidationError(f"grouping column {g!r} not in data")
        levels = sorted(frame[g].unique(), key=str)
        Z = np.column_stack([(frame[g] == lev).to_numpy(dtype=float) for lev in levels])
        Zs.append(Z)
        bnames.append(g)
        bkinds.append("random")
        names.extend(f"u({g})[{lev}]" for lev in levels)
    spline_terms = []
    for sp in splines:
        col = sp["column"]
        st = stds[col]
        xs = st.apply(frame[col].to_numpy(dtype=float))
        basis = SplineBasisSpec.from_data(xs, int(sp.get("K", 10)))
        Zs.append(radial_cubic_basis(xs, basis))
        bnames.append(f"s({col})")
        bkinds.append("spline")
        names.extend(f"s({col}).{k + 1}" for k in range(basis.K))
        spline_terms.append(SplineTerm(col, names.index(col), len(Zs) - 1, st, basis))

    C, blocks, qb = assemble_design(X, Zs, block_names=bnames, block_kinds=bkinds)
    assert qb == q_beta
    return Design(
        C=C,
        y=frame[response].to_numpy(dtype=float),
        q_beta=q_beta,
        blocks=blocks,
        names=names,
        standardisations=stds,
        splines=spline_terms,
        column_means=X.mean(axis=0) if n else np.zeros(q_beta),
    )
