"""Application configuration management."""
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings loaded from environment variables (prefix RLCM_)."""

    # Logging
    log_level: str = "INFO"
    show_progress: bool = False

    # Storage
    output_dir: str = "./runs"

    # Numeric capacity
    max_block_states: int = 20
    c2_max_states: int = 12
    vn_max_terms: int = 1_000_000

    # Execution
    n_jobs: int = 1

    model_config = SettingsConfigDict(
        env_prefix="RLCM_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",  # .env may carry unrelated variables
    )


# Global settings instance
settings = Settings()
