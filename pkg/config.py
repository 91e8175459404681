from pydantic import AliasChoices, Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Worker count for per-image attacks and per-branch fine-tuning (ECOC_WORKERS).
    workers: int = 1

    # NaN/Inf detection at every tape op boundary.
    checked_mode: bool = True

    # sylvester_hadamard refuses exponents above this (2^12 = 4096 rows).
    max_hadamard_exponent: int = 12

    default_step_size: float = 0.01

    lots_pool_size: int = 50
    lots_window: int = 10
    lots_tolerance: float = 1e-4

    histogram_bins: int = 20
    pixel_max: float = 255.0

    output_dir: str = "runs"
    verbose: bool = False

    # Langfuse credentials are accepted under the plain LANGFUSE_* names as well.
    langfuse_public_key: str = Field(
        default="", validation_alias=AliasChoices("ECOC_LANGFUSE_PUBLIC_KEY", "LANGFUSE_PUBLIC_KEY")
    )
    langfuse_secret_key: str = Field(
        default="", validation_alias=AliasChoices("ECOC_LANGFUSE_SECRET_KEY", "LANGFUSE_SECRET_KEY")
    )
    langfuse_base_url: str = Field(
        default="", validation_alias=AliasChoices("ECOC_LANGFUSE_BASE_URL", "LANGFUSE_BASE_URL")
    )

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="ECOC_",
        case_sensitive=False,
        extra="ignore",  # Ignore extra env vars
    )


# Load .env into the process environment too, so LANGFUSE_* names resolve.
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

settings = Settings()
