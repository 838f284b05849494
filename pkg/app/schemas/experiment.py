"""Pydantic schemas for experiment files and validation reports."""

from enum import Enum
from pathlib import Path

from pydantic import BaseModel, Field, model_validator

from app.schemas.simulation import MIN_MEASURED_SLOTS
from app.schemas.system import PolicyConfig, SystemParams


class ExperimentMode(str, Enum):
    ANALYTIC = "analytic"
    SIMULATE = "simulate"
    SWEEP = "sweep"
    VALIDATE = "validate"


class AxisName(str, Enum):
    PMAX_DB = "pmax_db"
    LAMBDA_P = "lambda_p"
    N_SU = "n_su"


class SweepAxis(BaseModel):
    name: AxisName
    start: float
    stop: float
    step: float = Field(gt=0.0)

    @model_validator(mode="after")
    def ordered_range(self) -> "SweepAxis":
        if self.stop < self.start:
            raise ValueError(f"sweep stop {self.stop} is below start {self.start}")
        return self

    def points(self) -> list[float]:
        """Axis values from start to stop inclusive."""
        count = int((self.stop - self.start) / self.step + 1e-9) + 1
        return [round(self.start + i * self.step, 12) for i in range(count)]


class ValidationSettings(BaseModel):
    model_config = {"extra": "forbid"}

    quad_n_max: int = Field(default=6, ge=2, le=10)
    a_grid: list[float] = [0.1, 0.6, 2.0]
    n_grid: list[int] = [2, 4, 8]
    lambdas: list[float] = [0.05, 0.1]
    pmax_db_grid: list[float] = [0.0, 4.0, 8.0, 12.0, 16.0, 20.0]
    ks_n_grid: list[int] = [2, 4]
    mc_draws: int = Field(default=10_000_000, ge=100_000)
    ks_samples: int = Field(default=1_000_000, ge=10_000)
    power_slots: int = Field(default=100_000, ge=100)
    bpl_gap_tolerance: float = Field(default=0.1, gt=0.0)


class ExperimentSpec(BaseModel):
    mode: ExperimentMode
    params: SystemParams
    series: list[int] = Field(min_length=1)
    policies: list[PolicyConfig] = Field(min_length=1)
    axis: SweepAxis | None = None
    output: Path | None = None
    seed: int = Field(ge=0, lt=2**63)
    slots: int = Field(gt=0)
    warmup_slots: int = Field(ge=0)
    workers: int = Field(default=1, ge=1)
    mc_draws: int = Field(default=0, ge=0)
    validation: ValidationSettings = ValidationSettings()

    @model_validator(mode="after")
    def sweep_has_axis(self) -> "ExperimentSpec":
        if self.mode is ExperimentMode.SWEEP and self.axis is None:
            raise ValueError("sweep mode needs exactly one [sweep] axis")
        if any(n < 2 for n in self.series):
            raise ValueError("every series needs N >= 2")
        if self.slots - self.warmup_slots < MIN_MEASURED_SLOTS:
            raise ValueError(
                f"slots ({self.slots}) must exceed warmup_slots ({self.warmup_slots}) by at least {MIN_MEASURED_SLOTS}"
            )
        return self


class ValidationCheck(BaseModel):
    check: str
    policy: str = ""
    n_su: int | None = None
    observed: float
    expected: float
    tolerance: float
    passed: bool

    @property
    def delta(self) -> float:
        return abs(self.observed - self.expected)
