"""Configuration management for fastfista."""

from enum import Enum
from pathlib import Path
from typing import Any

from pydantic import Field
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

# Get project root for .env file location
PROJECT_ROOT = Path(__file__).parent.parent


class InstanceFamily(str, Enum):
    """Built-in experiment families."""

    TRIDIAG = "tridiag"
    QUADRATIC = "quadratic"
    LASSO = "lasso"
    LINF = "linf"
    TV = "tv"
    LOGISTIC = "logistic"
    PCP = "pcp"


class Settings(BaseSettings):
    """fastfista configuration settings.

    Loads from a key=value config file and from environment variables (prefix
    ``FASTFISTA_``). Constructor values win over the config file, which wins
    over the environment.
    """

    model_config = SettingsConfigDict(
        env_prefix="FASTFISTA_",
        env_file=str(PROJECT_ROOT / ".env"),
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Instance configuration
    family: InstanceFamily = Field(
        default=InstanceFamily.TRIDIAG,
        description="Experiment family used when no instance file is given",
    )
    n: int | None = Field(default=None, gt=0, description="Problem dimension")
    m: int | None = Field(default=None, gt=0, description="Number of rows / samples")
    seed: int = Field(default=0, ge=0, description="Seed of the counter-based generator")
    mu: float | None = Field(default=None, gt=0, description="Regularisation weight")
    nu: float | None = Field(default=None, gt=0, description="Nuclear-norm weight (pcp)")
    noise_sigma: float = Field(default=0.0, ge=0, description="Observation noise level")
    dataset: Path | None = Field(default=None, description="LIBSVM file for the logistic family")
    standardize: bool = Field(default=False, description="Standardise logistic features")

    # Solver configuration
    variant: str = Field(default="bt", description="Solver preset, e.g. mod:0.05,0.5,4")
    max_iters: int = Field(default=10_000, gt=0)
    tol: float = Field(default=1e-10, ge=0)
    trace_stride: int | None = Field(default=None, gt=0)

    # Output configuration
    output_dir: Path = Field(default=Path("results"), description="Directory for traces")
    jobs: int = Field(default=1, gt=0, description="Parallel benchmark cells")

    # Logging configuration
    log_level: str = Field(default="INFO")
    log_file: Path | None = Field(default=None)

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return init_settings, dotenv_settings, env_settings, file_secret_settings


def load_settings(config_file: Path | None = None, **overrides: Any) -> Settings:
    """Build settings for one CLI invocation.

    Args:
        config_file: Optional key=value file (same syntax as a .env file)
        **overrides: Values given on the command line; ``None`` means "not given"

    Returns:
        Settings where flags override the config file, which overrides
        exported ``FASTFISTA_*`` variables, which override the defaults.
    """
    given = {key: value for key, value in overrides.items() if value is not None}
    if config_file is not None:
        if not config_file.is_file():
            raise FileNotFoundError(f"Config file not found: {config_file}")
        return Settings(_env_file=str(config_file), **given)  # type: ignore[call-arg]
    return Settings(**given)
