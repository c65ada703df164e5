"""HTTP service layer: pydantic schemas, handler functions, FastAPI app."""

from .app import (
    create_app,
    handle_eval,
    handle_predict_next,
    handle_predict_time,
    handle_synth,
    handle_train,
    load_dataset,
)

__all__ = [
    "create_app",
    "handle_eval",
    "handle_predict_next",
    "handle_predict_time",
    "handle_synth",
    "handle_train",
    "load_dataset",
]
