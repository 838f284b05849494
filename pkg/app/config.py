"""Configuration settings for Coop Relay Sim."""

import os
from functools import lru_cache

from dotenv import load_dotenv

load_dotenv()


class Settings:
    """Application settings loaded from environment variables."""

    # Simulation
    SIM_SLOTS: int = int(os.getenv("SIM_SLOTS", "1000000"))
    SIM_WARMUP_SLOTS: int = int(os.getenv("SIM_WARMUP_SLOTS", "10000"))
    SIM_SEED: int = int(os.getenv("SIM_SEED", "20240601"))

    # Sweeps
    SWEEP_WORKERS: int = int(os.getenv("SWEEP_WORKERS", "1"))

    # Oracles
    MC_DRAWS: int = int(os.getenv("MC_DRAWS", "10000000"))
    MC_BATCH_SIZE: int = int(os.getenv("MC_BATCH_SIZE", "250000"))
    KS_SAMPLES: int = int(os.getenv("KS_SAMPLES", "1000000"))
    BPL_GAP_TOLERANCE: float = float(os.getenv("BPL_GAP_TOLERANCE", "0.1"))

    # Application
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO").upper()

    def validate(self) -> list[str]:
        """Validate settings and return list of warnings."""
        errors = []
        if self.SIM_WARMUP_SLOTS >= self.SIM_SLOTS:
            errors.append("SIM_WARMUP_SLOTS is not below SIM_SLOTS - simulations will be rejected")
        if self.MC_DRAWS < 100_000:
            errors.append("MC_DRAWS is below 100000 - Monte Carlo oracle will refuse to run")
        if self.SWEEP_WORKERS < 1:
            errors.append("SWEEP_WORKERS must be at least 1 - falling back to serial execution")
        if self.MC_BATCH_SIZE < 1:
            errors.append("MC_BATCH_SIZE must be positive")
        return errors


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
