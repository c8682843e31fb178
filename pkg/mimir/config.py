# ---------------------------------------------------
# Config
# /config.py
# ---------------------------------------------------
from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import model_validator


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="MIMIR_",
        extra="ignore",
    )

    # Logging
    LOG_LEVEL: str = "WARNING"
    LOG_FORMAT: str = "%(levelname)s %(name)s: %(message)s"

    # Network (ticks, 1 tick = 1 simulated ms)
    MIN_DELAY: int = 1
    MAX_DELAY: int = 10
    DROP_PROBABILITY: float = 0.0

    # Leases
    LEASE_DURATION: int = 10_000
    SAFETY_MARGIN: int = 500
    RENEW_FRACTION: float = 0.5

    # OTM
    CHECKPOINT_INTERVAL: int = 2_000
    CHECKPOINT_COMMITS: int = 100
    TXN_IDLE_TIMEOUT: int = 4_000
    # settled minitransaction votes are kept this long for resolver queries
    VOTE_RETENTION: int = 60_000

    # Master / elasticity
    STATS_WINDOW: int = 5_000
    T_HIGH: int = 100
    T_LOW: int = 10
    DRAIN_TIMEOUT: int = 1_000
    DETECT_INTERVAL: int = 250
    MIN_OTMS: int = 1

    # Retries (simulated, see utils.helpers.retry_delays)
    RETRY_BASE: int = 20
    RETRY_CAP: int = 2_000

    @model_validator(mode="after")
    def validate_bounds(self):
        """Reject settings that make the protocols unsafe"""
        if self.MIN_DELAY > self.MAX_DELAY:
            raise ValueError("MIN_DELAY must not exceed MAX_DELAY")
        if self.T_LOW >= self.T_HIGH:
            raise ValueError("T_LOW must be below T_HIGH")
        if self.SAFETY_MARGIN >= self.LEASE_DURATION:
            raise ValueError("SAFETY_MARGIN must be shorter than LEASE_DURATION")
        if not 0.0 < self.RENEW_FRACTION < 1.0:
            raise ValueError("RENEW_FRACTION must be in (0, 1)")
        if self.VOTE_RETENTION <= 2 * self.LEASE_DURATION:
            raise ValueError("VOTE_RETENTION must outlast two lease periods")
        return self


# Instantiate the settings
settings = Settings()
