"""Pydantic schemas for system parameters and scheduling policies."""

from enum import Enum

from pydantic import BaseModel, Field, field_validator


class SystemParams(BaseModel):
    n_su: int = Field(ge=2)
    lambda_p: float = Field(ge=0.0, lt=1.0)
    rate_r0: float = Field(gt=0.0)
    p0_over_n0: float = Field(gt=0.0)
    pmax_over_n0: float = Field(ge=0.0)
    sigma_p_sq: float = Field(gt=0.0, le=1.0)
    sigma_sq: float = 1.0

    model_config = {"frozen": True}

    @field_validator("sigma_sq")
    @classmethod
    def unit_secondary_fading(cls, value: float) -> float:
        if value != 1.0:
            raise ValueError("sigma_sq is normalized to 1")
        return value


class PowerPolicy(str, Enum):
    EP = "EP"
    AP = "AP"


class SelectionPolicy(str, Enum):
    BSL = "BSL"
    BPL = "BPL"


class Reselection(str, Enum):
    ANALYSIS_FAITHFUL = "analysis_faithful"
    LITERAL = "literal"


class PolicyConfig(BaseModel):
    power: PowerPolicy
    selection: SelectionPolicy
    reselect_on_silence: Reselection = Reselection.ANALYSIS_FAITHFUL

    model_config = {"frozen": True}

    @property
    def label(self) -> str:
        return f"{self.power.value}-{self.selection.value}"

    @classmethod
    def from_label(cls, label: str, reselect_on_silence: Reselection = Reselection.ANALYSIS_FAITHFUL) -> "PolicyConfig":
        """Parse a combination label such as ``AP-BPL``."""
        try:
            power, selection = label.strip().upper().split("-")
            return cls(
                power=PowerPolicy(power),
                selection=SelectionPolicy(selection),
                reselect_on_silence=reselect_on_silence,
            )
        except ValueError as e:
            raise ValueError(f"Unknown policy combination {label!r}, expected e.g. 'AP-BSL'") from e


ALL_POLICIES: tuple[PolicyConfig, ...] = tuple(
    PolicyConfig(power=power, selection=selection) for power in PowerPolicy for selection in SelectionPolicy
)
