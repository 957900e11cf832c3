"""
Experiment configuration: a JSON document validated by pydantic.

Unknown keys are rejected at every level. Step sizes are checked against the
cap ``1 / kappa1^2`` of the configured model at parse time.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..errors import ConfigError
from ..models import ForwardModel, build_model


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelBlock(_Block):
    kind: Literal["linear-integral", "pointwise-nonlinear", "diffusion-pde"] = "linear-integral"
    p: int = Field(64, ge=2)
    m: int = Field(1, ge=1)
    kernel: Literal["step", "min", "gaussian"] = "step"
    scale: float = Field(3.0, gt=0)
    sigma: float = Field(0.1, gt=0)
    beta: float = Field(0.25, ge=0)
    a_min: float = Field(0.5, gt=0)
    load: Literal["one", "sine"] = "one"
    ball_radius: float = Field(1.0, gt=0)

    def build(self) -> ForwardModel:
        return build_model(**self.model_dump())


class TruthBlock(_Block):
    r: float = Field(0.5, gt=0)
    D: float = Field(0.5, gt=0)
    g: Literal["powerlaw", "random"] = "powerlaw"
    g_decay: float = 0.5
    g_seed: int = Field(0, ge=0)
    nu: float = Field(0.5, gt=0, lt=1)
    nu_from_fit: bool = False


class NoiseBlock(_Block):
    kind: Literal["none", "uniform-bounded", "truncated-gaussian"] = "uniform-bounded"
    scale: float = Field(0.05, ge=0)


class DesignBlock(_Block):
    kind: Literal["uniform", "beta"] = "uniform"
    a: float = Field(1.0, gt=0)
    b: float = Field(1.0, gt=0)

    def as_tuple(self):
        return ("beta", self.a, self.b) if self.kind == "beta" else None


class ScheduleBlock(_Block):
    """Step size and horizon. For GD a ``case`` only selects the preset step size
    ``c_eta / kappa1^2``; the horizon is then the early stopping time."""

    case: Literal["a", "b", "c", "d"] | None = None
    eta: float | None = Field(None, gt=0)
    batch: int | None = Field(None, ge=1)
    t_max: int | None = Field(None, ge=1)
    c_eta: float = Field(0.9, gt=0, lt=1)


class DescentBlock(_Block):
    threshold: float = Field(0.9, ge=0, le=1)
    extend: float = Field(1.0, ge=1.0)
    traces: int = Field(5, ge=0)


class ConcentrationBlock(_Block):
    n: int = Field(1024, ge=2)
    deltas: list[float] = [0.1, 0.05]
    lambdas: list[float] | None = None
    n_lambdas: int = Field(5, ge=1)
    reps: int = Field(100, ge=20)

    @field_validator("deltas")
    @classmethod
    def _deltas(cls, v):
        if not v or any(not 0 < d < 1 for d in v):
            raise ValueError("every delta must lie in (0, 1)")
        return v


class ExperimentConfig(_Block):
    model: ModelBlock = ModelBlock()
    truth: TruthBlock = TruthBlock()
    noise: NoiseBlock = NoiseBlock()
    design: DesignBlock = DesignBlock()
    n_grid: list[int] = [256, 512, 1024, 2048, 4096]
    replicates: int = Field(50, ge=10)
    solver: Literal["gd", "sgd"] = "gd"
    schedule: ScheduleBlock = ScheduleBlock()
    cases: list[Literal["a", "b", "c", "d"]] = ["a", "b", "c", "d"]
    u: float = 0.0
    slope_tolerance: float = Field(0.15, gt=0)
    quadrature: int = Field(2048, ge=16)
    domain_policy: Literal["reject", "project"] = "reject"
    descent: DescentBlock = DescentBlock()
    concentration: ConcentrationBlock = ConcentrationBlock()
    output: str = "results"
    seed: int = Field(0, ge=0, lt=2**64)

    @field_validator("n_grid")
    @classmethod
    def _grid(cls, v):
        if not v:
            raise ValueError("n_grid must be non-empty")
        if any(n < 2 for n in v):
            raise ValueError("n_grid entries must be integers >= 2")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("n_grid must be strictly ascending")
        return v

    @field_validator("u")
    @classmethod
    def _u(cls, v):
        if v not in (0.0, 0.5):
            raise ValueError("u must be 0 or 0.5")
        return v

    @model_validator(mode="after")
    def _solver(self):
        s = self.schedule
        if self.solver == "gd" and s.eta is None and s.case is None:
            raise ValueError("schedule.eta is required for solver=gd when no schedule.case is given")
        if self.solver == "sgd" and s.case is None and None in (s.eta, s.batch, s.t_max):
            raise ValueError("solver=sgd needs schedule.case or all of schedule.eta, schedule.batch, schedule.t_max")
        return self


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        parts.append(f"{loc}: {msg}")
    return "invalid config: " + "; ".join(parts)


def check_step_cap(cfg: ExperimentConfig, model: ForwardModel | None = None) -> None:
    eta = cfg.schedule.eta
    if eta is None:
        return
    model = model or cfg.model.build()
    cap = model.constants.step_cap
    if not eta < cap:
        raise ConfigError(f"schedule.eta = {eta:g} violates the step cap eta < 1/kappa1^2 = {cap:.6g}")


def config_from_dict(data: dict) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None
    check_step_cap(cfg)
    return cfg


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return config_from_dict(data)


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def sample_config(study: str = "run") -> ExperimentConfig:
    """Defaults for each study; ``gen`` writes one of these."""
    if study == "schedules":
        return ExperimentConfig(solver="sgd", schedule=ScheduleBlock(case="b"), cases=["b", "c", "d"],
                                slope_tolerance=0.2, output="results/schedules")
    if study == "descent":
        return ExperimentConfig(n_grid=[1024], schedule=ScheduleBlock(case="c"), output="results/descent")
    if study == "concentration":
        return ExperimentConfig(schedule=ScheduleBlock(case="c"), output="results/concentration")
    return ExperimentConfig(schedule=ScheduleBlock(case="c"), output="results/run")
