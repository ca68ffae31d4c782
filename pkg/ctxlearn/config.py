import logging
from pathlib import Path
from typing import Literal, Optional

from pydantic_settings import BaseSettings, SettingsConfigDict

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class Settings(BaseSettings):
    """Process-level settings loaded from environment variables (prefix CTXLEARN_)."""

    model_config = SettingsConfigDict(
        env_prefix="CTXLEARN_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    app_name: str = "ctxlearn"
    log_level: str = "INFO"

    # Where runs, checkpoints and the results ledger go when --out is not given
    output_root: Path = Path("outputs")

    # Numerics
    dtype: Literal["float64", "float32"] = "float64"
    check_numerics: bool = True

    # Serialize everything (no prefetch, no wall-clock in the CSV)
    strict: bool = False

    # Results ledger
    results_db_url: Optional[str] = None

    def validate_settings(self):
        """Validate settings that pydantic cannot check on its own."""
        errors = []

        if logging.getLevelName(self.log_level.upper()) not in (
            logging.DEBUG, logging.INFO, logging.WARNING, logging.ERROR, logging.CRITICAL
        ):
            errors.append(f"CTXLEARN_LOG_LEVEL={self.log_level!r} is not a logging level")

        if errors:
            raise ValueError(f"Invalid settings: {', '.join(errors)}")

    @property
    def database_url(self) -> str:
        if self.results_db_url:
            return self.results_db_url
        return f"sqlite:///{(self.output_root / 'results.db').as_posix()}"


def setup_logging(level: Optional[str] = None) -> None:
    """Configure root logging once, in the format every module logs with."""
    logging.basicConfig(
        format=LOG_FORMAT,
        level=(level or settings.log_level).upper(),
    )


# Global settings instance
settings = Settings()

try:
    settings.validate_settings()
except ValueError as e:
    print(f"⚠️  Configuration Warning: {e}")
    settings.log_level = "INFO"
