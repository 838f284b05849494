"""Pydantic schemas for analytic results and distribution specs."""

from enum import Enum

from pydantic import BaseModel, Field

from app.schemas.system import SelectionPolicy


class LinkStats(BaseModel):
    f_p: float = Field(ge=0.0, le=1.0)
    f_ps: float = Field(ge=0.0, le=1.0)
    f_rstar: float = Field(ge=0.0, le=1.0)
    f_sstar: float = Field(ge=0.0, le=1.0)

    model_config = {"frozen": True}

    @property
    def mu_p(self) -> float:
        return self.f_p + (1.0 - self.f_p) * self.f_ps


class DelayBreakdown(BaseModel):
    n_p: float = Field(ge=0.0)
    n_r: float = Field(ge=0.0)
    tau: float = Field(ge=1.0)
    tau_p: float
    tau_r: float | None
    epsilon: float = Field(ge=0.0, le=1.0)
    r: float
    s: float
    delta: float
    zeta: float
    eta: float


class Link(str, Enum):
    RELAY = "relay"
    OWN = "own"
    INTERFERENCE = "interference"


class PdfSpec(BaseModel):
    policy: SelectionPolicy
    link: Link
    n_su: int = Field(ge=2)

    model_config = {"frozen": True}
