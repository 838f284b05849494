"""Pydantic schemas for simulation runs and their measurements."""

from typing import Literal

from pydantic import BaseModel, Field, model_validator

from app.schemas.system import PolicyConfig, SystemParams

STABILITY_WINDOWS = 10
# Two queue-length samples per stability window.
MIN_MEASURED_SLOTS = 2 * STABILITY_WINDOWS


class SimConfig(BaseModel):
    params: SystemParams
    policy: PolicyConfig
    slots: int = Field(gt=0)
    warmup_slots: int = Field(default=10_000, ge=0)
    seed: int = Field(ge=0, lt=2**64)

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def horizon_exceeds_warmup(self) -> "SimConfig":
        if self.slots - self.warmup_slots < MIN_MEASURED_SLOTS:
            raise ValueError(
                f"slots ({self.slots}) must exceed warmup_slots ({self.warmup_slots}) by at least {MIN_MEASURED_SLOTS}"
            )
        return self


class StabilityReport(BaseModel):
    verdict: Literal["stable", "growing"]
    slope: float
    first_window_mean: float
    last_window_mean: float
    windows: int

    @property
    def stable(self) -> bool:
        return self.verdict == "stable"


class SimMetrics(BaseModel):
    pu_throughput: float = Field(ge=0.0, le=1.0)
    su_throughput: list[float]
    avg_delay: float | None
    mean_qp: float
    mean_qr: float
    avg_power_s: float
    avg_power_r: float
    cond_power_s: float | None
    cond_power_r: float | None
    relay_success_rate: float | None
    own_success_rate: float | None
    relayed_fraction: float | None
    relay_attempts: int
    su_slots: int
    failed_active_transmissions: int
    measured_slots: int
    arrivals: int
    direct_deliveries: int
    relayed_deliveries: int
    residual_qp: int
    residual_qr: int
    stability: StabilityReport

    @model_validator(mode="after")
    def consistent_rates(self) -> "SimMetrics":
        if sum(self.su_throughput) > 1.0 + 1e-12:
            raise ValueError("SU throughputs cannot sum above one packet per slot")
        if self.avg_delay is not None and self.avg_delay < 1.0:
            raise ValueError("a delivered packet spends at least one slot in the system")
        return self
