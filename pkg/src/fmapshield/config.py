import os
from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict

PROJECT_ROOT = Path(__file__).resolve().parent.parent.parent


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=PROJECT_ROOT / ".env",
        env_file_encoding="utf-8",
        env_prefix="FMAPSHIELD_",
        extra="ignore",
    )

    # Execution
    threads: int = os.cpu_count() or 1
    chunk_size: int = 512  # perturbed inferences per batched call

    # Campaigns
    seed: int = 0
    exhaustive_site_limit: int = 100_000
    golden_cache_limit: int = 100_000

    # Output
    out_dir: Path = Path("out")

    # App
    app_env: str = "development"
    log_level: str = "INFO"


settings = Settings()
