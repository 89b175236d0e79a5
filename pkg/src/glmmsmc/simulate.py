"""Seeded data generators: the semiparametric Poisson experiment and a
longitudinal logistic additive mixed model with random subject intercepts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import expit

from .errors import ValidationError

POISSON_COEFS = {"x1": 0.7, "x2": 2.0}

# Default fixed effects for the longitudinal generator, in the covariate
# order used by the data frame.
LOGIT_FIXED_DEFAULT = {
    "vitA": 0.61, "male": 0.563, "height": 0.0338, "stunted": 0.474,
    "visit2": -1.2, "visit3": -0.629, "visit4": -1.37, "visit5": 0.468, "visit6": -0.0384,
}
LOGIT_INTERCEPT_DEFAULT = -2.0
LOGIT_SIGMA_U_DEFAULT = 0.928


def poisson_mean_function(x2):
    """Non-constant part of the log mean in ``x2``: ``2 x2 + cos(4 pi x2)``."""
    x2 = np.asarray(x2, dtype=float)
    return 2.0 * x2 + np.cos(4.0 * np.pi * x2)


def age_effect_default(age_years):
    """Default smooth age effect on the logit scale (age in years)."""
    a = np.asarray(age_years, dtype=float)
    return 0.8 * np.exp(-0.5 * ((a - 2.0) / 1.0) ** 2) - 0.25 * a


AGE_EFFECTS = {"default": age_effect_default, "zero": lambda a: np.zeros_like(np.asarray(a, float))}


@dataclass
class SimulatedDataset:
    data: pd.DataFrame
    truth: dict

    def write(self, out_dir):
        import json
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.data.to_csv(out / "data.csv", index=False)
        (out / "truth.json").write_text(json.dumps(self.truth, indent=2, sort_keys=True) + "\n")


def simulate_poisson(n: int = 500, seed: int = 0) -> SimulatedDataset:
    """``y ~ Poisson(exp(0.7 x1 + 2 x2 + cos(4 pi x2)))`` with
    ``x1 ~ Bernoulli(0.5)`` and ``x2 ~ Uniform(0, 1)``."""
    if n < 1:
        raise ValidationError("n must be at least 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    x1 = rng.integers(0, 2, size=n)
    x2 = rng.random(n)
    mu = np.exp(POISSON_COEFS["x1"] * x1 + poisson_mean_function(x2))
    y = rng.poisson(mu)
    grid = np.linspace(0.0, 1.0, 201)
    truth = {
        "kind": "poisson",
        "seed": seed,
        "n": n,
        "coefficients": dict(POISSON_COEFS),
        "log_mean": "0.7*x1 + 2*x2 + cos(4*pi*x2)",
        "f_grid": {"x2": grid.tolist(), "f": np.cos(4 * np.pi * grid).tolist()},
    }
    data = pd.DataFrame({"y": y.astype(int), "x1": x1.astype(int), "x2": x2})
    return SimulatedDataset(data, truth)


def simulate_logit_longitudinal(n_subjects: int = 275, n_visits: int = 6,
                                sigma_U: float = LOGIT_SIGMA_U_DEFAULT,
                                fixed_effects: dict | None = None, f="default",
                                seed: int = 0, intercept: float = LOGIT_INTERCEPT_DEFAULT,
                                visit_prob: float = 0.85) -> SimulatedDataset:
    """Binary longitudinal data with a random subject intercept, nine fixed
    covariates (three binary, height, visit 2..6 indicators) and a smooth age
    effect: ``logit P(y=1) = b0 + U_i + beta'x_ij + f(age_ij)``.

    Each subject is seen at visits ``1..n_visits``, each kept independently
    with probability ``visit_prob`` (at least one visit per subject). ``f``
    is a callable on age in years or a key of :data:`AGE_EFFECTS`.
    """
    if n_subjects < 1 or n_visits < 1:
        raise ValidationError("n_subjects and n_visits must be positive")
    if sigma_U < 0:
        raise ValidationError("sigma_U must be non-negative")
    beta = dict(LOGIT_FIXED_DEFAULT if fixed_effects is None else fixed_effects)
    f_name = f if isinstance(f, str) else getattr(f, "__name__", "custom")
    f_fn = AGE_EFFECTS[f] if isinstance(f, str) else f

    rng = np.random.Generator(np.random.PCG64(seed))
    U = rng.standard_normal(n_subjects) * sigma_U
    vitA = rng.random(n_subjects) < 0.1
    male = rng.random(n_subjects) < 0.5
    stunted = rng.random(n_subjects) < 0.15
    age0 = rng.uniform(0.5, 5.0, n_subjects)
    keep = rng.random((n_subjects, n_visits)) < visit_prob
    keep[np.arange(n_subjects), rng.integers(0, n_visits, n_subjects)] |= ~keep.any(axis=1)
    height_z = rng.standard_normal((n_subjects, n_visits))

    rows = []
    for i in range(n_subjects):
        for v in range(n_visits):
            if not keep[i, v]:
                continue
            age = age0[i] + 0.25 * v
            row = {"subject": i + 1, "visit": v + 1, "age": age,
                   "vitA": int(vitA[i]), "male": int(male[i]), "stunted": int(stunted[i]),
                   "height": float(80.0 + 9.0 * age + 4.0 * height_z[i, v])}
            rows.append(row)
    data = pd.DataFrame(rows)
    eta = intercept + U[data["subject"].to_numpy() - 1] + f_fn(data["age"].to_numpy())
    for k, b in beta.items():
        if k.startswith("visit") and k[5:].isdigit():
            eta = eta + b * (data["visit"].to_numpy() == int(k[5:]))
        elif k in data:
            eta = eta + b * data[k].to_numpy()
        else:
            raise ValidationError(f"unknown fixed effect {k!r}")
    data["y"] = (rng.random(len(data)) < expit(eta)).astype(int)
    data = data[["subject", "visit", "y", "age", "vitA", "male", "height", "stunted"]]
    truth = {
        "kind": "logit",
        "seed": seed,
        "n_subjects": n_subjects,
        "n_visits": n_visits,
        "intercept": intercept,
        "sigma_U": sigma_U,
        "fixed_effects": beta,
        "f": f_name,
        "random_intercepts": U.tolist(),
    }
    return SimulatedDataset(data, truth)
