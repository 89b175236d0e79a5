"""Sequential Monte Carlo for generalised linear mixed models, with
comparison samplers, diagnostics and a command line front end."""
from .errors import (BracketError, NotPositiveDefinite, NumericError, ValidationError,
                     WeightDegeneracyError)
from .model import Family, ModelSpec, ParamState, RandomBlock
from .pql import PqlFit, pql_fit
from .smc import MoveConfig, SmcConfig, make_schedule, run

__all__ = [
    "BracketError", "Family", "ModelSpec", "MoveConfig", "NotPositiveDefinite", "NumericError",
    "ParamState", "PqlFit", "RandomBlock", "SmcConfig", "ValidationError",
    "WeightDegeneracyError", "make_schedule", "pql_fit", "run",
]
