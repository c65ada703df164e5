"""Request/response bodies for the HTTP service. The CLI builds the same
models and calls the handlers in-process, so both entry points validate
identically."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class ConfigPatch(BaseModel):
    """Subset of run-configuration fields; unset fields keep their defaults
    (or, for evaluation endpoints, the values stored in the checkpoint)."""

    model_config = ConfigDict(extra="forbid")

    d: Optional[int] = None
    time_dim: Optional[int] = None
    alpha: Optional[float] = None
    dropout: Optional[float] = None
    lr: Optional[float] = None
    epochs: Optional[int] = None
    solver_steps: Optional[int] = None
    grid: Optional[int] = None
    seed: Optional[int] = None
    split: Optional[tuple[float, float, float]] = None
    m0: Optional[Literal["root", "mean"]] = None
    rescale: Optional[Literal["max", "offset"]] = None
    encounter: Optional[str] = None
    clamp_negative_w: Optional[bool] = None
    lambda_ode: Optional[float] = None

    def overrides(self) -> dict:
        out = self.model_dump(exclude_none=True)
        if "split" in out:
            out["split"] = tuple(out["split"])
        return out


class DatasetRef(BaseModel):
    """Paths naming a graph (and optionally features) on the service host."""

    model_config = ConfigDict(extra="forbid")

    graph: str
    features: Optional[str] = None
    num_users: Optional[int] = Field(
        default=None,
        description="Inferred from the feature file or the largest node id when omitted.",
    )


class HealthResponse(BaseModel):
    status: str
    version: str


class SynthRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    users: int
    cascades: int
    seed: int = 0
    out_dir: str
    mean_length: float = 8.0
    beta: float = 200.0
    pace: float = 0.35
    jitter: float = 0.03
    latency_sigma: float = 0.8
    dist_power: float = 0.25
    scale_sigma: float = 0.9
    feature_dim: int = 16
    teacher_d: int = 16
    teacher_time_dim: int = 8


class SynthResponse(BaseModel):
    num_users: int
    num_cascades: int
    mean_length: float
    files: dict[str, str]


class TrainRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: DatasetRef
    cascades: str
    out: str
    config: ConfigPatch = Field(default_factory=ConfigPatch)


class TrainResponse(BaseModel):
    checkpoint: str
    epochs: int
    best_epoch: Optional[int]
    best_val: Optional[float]
    split_sizes: tuple[int, int, int]
    final_ricci: float
    final_ode: float
    final_total: float


class EvalRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ckpt: str
    dataset: DatasetRef
    cascades: str
    ks: list[int] = Field(default_factory=lambda: [10, 50])
    eval_split: Literal["train", "val", "test", "all"] = "test"
    with_time: bool = True
    wallclock: bool = False
    encounter: Optional[str] = None
    grid: Optional[int] = None


class EvalResponse(BaseModel):
    report: dict
    table: str
    evaluated_cascades: int


class PredictNextRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ckpt: str
    dataset: DatasetRef
    cascades: str


class StepRanking(BaseModel):
    message_id: str
    step: int
    ranking: list[tuple[int, float]]


class PredictNextResponse(BaseModel):
    entries: list[StepRanking]


class PredictTimeRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ckpt: str
    dataset: DatasetRef
    prefix: str
    targets: Optional[list[int]] = Field(
        default=None, description="Defaults to every user absent from the prefix."
    )
    horizon: float = Field(gt=0, description="Wall-clock scale in seconds.")
    grid: Optional[int] = None
    encounter: Optional[str] = None


class TimePrediction(BaseModel):
    target: int
    t_sys: float
    t_wallclock: float
    min_distance: float


class PredictTimeResponse(BaseModel):
    predictions: list[TimePrediction]


class ErrorBody(BaseModel):
    kind: Literal["validation", "divergence"]
    message: str
    step: Optional[int] = None
