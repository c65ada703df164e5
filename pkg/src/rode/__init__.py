"""Who gets the message next, and when: curvature-ranked spread prediction
with a learned continuous-time trajectory for arrival-time estimates."""

__version__ = "0.1.0"

from .config import RunConfig
from .data import Cascade, SocialGraph, TemporalUMGraph
from .errors import ContractViolation, NumericalDivergence, ValidationError
from .harness import (
    EvalReport,
    evaluate,
    generate_synthetic,
    init_params,
    load_model,
    save_model,
    train,
)

__all__ = [
    "__version__",
    "RunConfig",
    "Cascade",
    "SocialGraph",
    "TemporalUMGraph",
    "ContractViolation",
    "NumericalDivergence",
    "ValidationError",
    "EvalReport",
    "evaluate",
    "generate_synthetic",
    "init_params",
    "load_model",
    "save_model",
    "train",
]
