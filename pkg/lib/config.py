"""
Runtime settings and key=value experiment file loading
"""

from pathlib import Path
from typing import Dict, List, Union

from dotenv import dotenv_values
from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class ConfigFileError(ValueError):
    """Unreadable or malformed key=value file"""
    pass


class Settings(BaseSettings):
    """Process-wide settings loaded from MPT_* environment variables"""

    model_config = SettingsConfigDict(
        env_prefix="MPT_",
        env_file=".env",
        extra="ignore",
        case_sensitive=False
    )

    # Logging
    log_level: str = Field(default="INFO", description="Minimum log level")
    log_format: str = Field(default="json", description="json or console rendering")

    # Execution
    eval_workers: int = Field(default=1, ge=1, description="Threads used for per-sequence evaluation")
    default_seed: int = Field(default=0, description="Seed used when a config file omits one")

    # Gradient checking
    gradcheck_seeds: int = Field(default=20, ge=1, description="Random seeds per gradcheck entry")
    gradcheck_eps: float = Field(default=1e-5, ge=1e-7, le=1e-3, description="Central-difference step")
    gradcheck_tolerance: float = Field(default=1e-4, gt=0, description="Max relative error accepted")

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Normalize and validate the log level name"""
        level = v.strip().upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"Invalid log level: {v}")
        return level

    @field_validator("log_format")
    @classmethod
    def validate_log_format(cls, v: str) -> str:
        """Only JSON and console renderers exist"""
        fmt = v.strip().lower()
        if fmt not in ("json", "console"):
            raise ValueError(f"Invalid log format: {v}")
        return fmt


def read_key_values(path: Union[str, Path]) -> Dict[str, str]:
    """Read a plain-text key=value file; '#' starts a comment line"""
    path = Path(path)
    if not path.is_file():
        raise ConfigFileError(f"Config file not found: {path}")

    values = dotenv_values(path)
    parsed: Dict[str, str] = {}
    for key, value in values.items():
        if value is None:
            raise ConfigFileError(f"{path}: key '{key}' has no value")
        parsed[key.strip().lower()] = value.strip()
    return parsed


def parse_int_list(v: Union[str, List[int], tuple]) -> List[int]:
    """Parse '1,2,4' into [1, 2, 4]"""
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    if not v.strip():
        return []
    try:
        return [int(x.strip()) for x in v.split(",") if x.strip()]
    except ValueError as e:
        raise ValueError(f"Expected comma-separated integers: {e}")


# Global settings instance
settings = Settings()
