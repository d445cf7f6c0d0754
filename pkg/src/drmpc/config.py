"""Run configuration: schema, defaults, and JSON loading."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError

Vec2 = tuple[float, float]
Vec4 = tuple[float, float, float, float]

DEFAULT_A = (
    (1.0, 0.0, 1.0, 0.0),
    (0.0, 1.0, 0.0, 1.0),
    (0.0, 0.0, 1.0, 0.0),
    (0.0, 0.0, 0.0, 1.0),
)
DEFAULT_B = ((0.0, 0.0), (0.0, 0.0), (1.0, 0.0), (0.0, 1.0))


class RunConfig(BaseModel):
    """All parameters of a planning run; omitted fields take the documented defaults."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    beta: float = Field(0.05, gt=0, lt=1)
    d_min: float = Field(0.1, ge=0)
    agent_radius: float = Field(0.2, ge=0)
    obstacle_side: float = Field(1.0, gt=0)
    obstacle_center: Vec2 = (2.0, 1.2)
    horizon: int = Field(11, ge=1, le=100)
    theta: float | list[float] = 1e-3
    zeta: float = Field(0.9, gt=0, lt=1, description="confidence level; recorded, not used")
    iterations: int = Field(20, ge=1, le=1000)
    n_clusters: int = Field(5, ge=1)
    kmeans_restarts: int = Field(10, ge=1)
    initial_samples: int = Field(15, ge=1)
    sigma: float = Field(0.15, gt=0)
    support_half_width: float = Field(0.45, gt=0)
    Q_diag: Vec4 = (1.0, 1.0, 0.01, 0.01)
    R_diag: Vec2 = (0.01, 0.01)
    A: tuple[Vec4, Vec4, Vec4, Vec4] = DEFAULT_A
    B: tuple[Vec2, Vec2, Vec2, Vec2] = DEFAULT_B
    x_start: Vec4 = (0.0, 0.0, 0.0, 0.0)
    x_target: Vec4 = (5.0, 3.0, 0.0, 0.0)
    state_lower: Vec4 = (-1.0, -1.5, -0.5, -0.5)
    state_upper: Vec4 = (7.0, 5.5, 0.5, 0.5)
    input_lower: Vec2 = (-0.05, -0.05)
    input_upper: Vec2 = (0.05, 0.05)
    terminal_tol: float = Field(1e-2, gt=0)
    step_cap: int = Field(200, ge=1)
    convexification_rounds: int = Field(3, ge=1, le=10)
    robust_horizon: int = Field(60, ge=2, le=500)
    solver_tol: float = Field(1e-9, gt=0, lt=1e-2)
    seed: int = Field(0, ge=0, lt=2**64)
    variant: Literal["wass", "cl-wass", "inn", "all"] = "all"
    output_dir: str = "out"
    timing: Literal["wall", "off"] = "wall"

    @field_validator("theta")
    @classmethod
    def _theta_nonneg(cls, v):
        vals = v if isinstance(v, list) else [v]
        if not vals or any(not (t >= 0) for t in vals):
            raise ValueError("theta must be a nonnegative number or a nonempty list of them")
        return v

    @field_validator("Q_diag", "R_diag")
    @classmethod
    def _diag_nonneg(cls, v):
        if any(x < 0 for x in v):
            raise ValueError("cost weights must be nonnegative")
        return v

    @model_validator(mode="after")
    def _consistency(self):
        if any(r <= 0 for r in self.R_diag):
            raise ValueError("R_diag must be strictly positive")
        if isinstance(self.theta, list) and len(self.theta) < self.iterations:
            raise ValueError("theta list must provide one radius per iteration")
        for lo, hi in ((self.state_lower, self.state_upper), (self.input_lower, self.input_upper)):
            if any(a > b for a, b in zip(lo, hi)):
                raise ValueError("box lower bounds exceed upper bounds")
        if any(a > 0 or b < 0 for a, b in zip(self.input_lower, self.input_upper)):
            raise ValueError("input box must contain 0")
        return self

    def theta_at(self, j: int) -> float:
        """Radius used to build the safety set after iteration ``j`` (``j = 0`` for the initial set)."""
        if isinstance(self.theta, list):
            return float(self.theta[min(j, len(self.theta) - 1)])
        return float(self.theta)

    @property
    def clearance(self) -> float:
        return self.d_min + self.agent_radius


def parse_config(path) -> RunConfig:
    """Load and validate a JSON config file.

    Raises:
        ConfigurationError: If the file is missing, not JSON, or fails validation;
            the message names the offending field path.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


def config_from_dict(data) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a JSON object")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        parts = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            parts.append(f"{loc}: {err['msg']}")
        raise ConfigurationError("invalid config: " + "; ".join(parts)) from exc


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, indent=2)
