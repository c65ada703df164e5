"""Run configuration shared by training, evaluation, and the service."""

from __future__ import annotations

import dataclasses

from .errors import ValidationError


@dataclasses.dataclass
class RunConfig:
    d: int = 64  # embedding dim
    time_dim: int = 16  # cosine time-encoding dim
    alpha: float = 0.5  # lazy-walk mass kept at the center node
    dropout: float = 0.3
    lr: float = 1e-3
    epochs: int = 40
    solver_steps: int = 32
    grid: int = 256
    seed: int = 0
    split: tuple = (0.8, 0.1, 0.1)
    m0: str = "root"  # message start: "root" (first infected user) or "mean"
    rescale: str = "max"  # cascade-time rescaling: "max" (t/t_last) or "offset"
    encounter: str = "argmin"  # or "threshold:<radius>"
    clamp_negative_w: bool = True  # clamp the surrogate distance at 0
    lambda_ode: float = 1.0  # weight of the trajectory-fit loss

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d < 1 or self.time_dim < 1:
            raise ValidationError("dims must be >= 1")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValidationError(f"alpha {self.alpha} outside [0, 1]")
        if not (0.0 <= self.dropout < 1.0):
            raise ValidationError(f"dropout {self.dropout} outside [0, 1)")
        if self.lr <= 0.0:
            raise ValidationError("lr must be positive")
        if self.epochs < 0 or self.solver_steps < 1 or self.grid < 1:
            raise ValidationError("epochs must be >= 0, solver_steps and grid >= 1")
        if self.m0 not in ("root", "mean"):
            raise ValidationError(f"unknown m0 mode {self.m0!r}")
        if self.rescale not in ("max", "offset"):
            raise ValidationError(f"unknown rescale mode {self.rescale!r}")
        if self.lambda_ode < 0.0:
            raise ValidationError("lambda_ode must be >= 0")
        if self.encounter != "argmin":
            if not self.encounter.startswith("threshold:"):
                raise ValidationError(f"unknown encounter rule {self.encounter!r}")
            try:
                r = float(self.encounter.split(":", 1)[1])
            except ValueError:
                raise ValidationError(f"bad encounter radius in {self.encounter!r}") from None
            if r <= 0.0:
                raise ValidationError("encounter radius must be positive")
        s = tuple(float(x) for x in self.split)
        if len(s) != 3 or any(x < 0 for x in s) or abs(sum(s) - 1.0) > 1e-9:
            raise ValidationError(f"split {self.split} must be three non-negative ratios summing to 1")
        self.split = s

    def encounter_radius(self) -> float | None:
        """None for the argmin rule, otherwise the threshold radius."""
        if self.encounter == "argmin":
            return None
        return float(self.encounter.split(":", 1)[1])

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["split"] = list(out["split"])
        return out

    @staticmethod
    def from_dict(values: dict) -> "RunConfig":
        fields = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(values) - fields
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(values)
        if "split" in kwargs:
            kwargs["split"] = tuple(kwargs["split"])
        return RunConfig(**kwargs)
