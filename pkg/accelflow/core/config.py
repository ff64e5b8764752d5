import os
from dataclasses import dataclass

from dotenv import load_dotenv

load_dotenv()


@dataclass(frozen=True)
class Settings:
    """Process-level settings read from the environment (or a `.env` file)."""
    LOG_LEVEL: str = os.getenv("ACCELFLOW_LOG_LEVEL", "INFO")
    MAX_WORKERS: int = int(os.getenv("ACCELFLOW_MAX_WORKERS", "4"))
    OUTPUT_DIR: str = os.getenv("ACCELFLOW_OUTPUT_DIR", "results")


settings = Settings()
