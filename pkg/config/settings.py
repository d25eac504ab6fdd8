"""Configuration settings for the Bregman divergence learner

Loads environment variables from .env and exposes a simple Settings object.
"""

import os
from dataclasses import dataclass
from typing import Optional

from dotenv import load_dotenv

load_dotenv()


@dataclass
class Settings:
    OUTPUT_DIR: str = os.getenv("PBDL_OUTPUT_DIR", "runs")
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_FILE: Optional[str] = os.getenv("PBDL_LOG_FILE") or None


settings = Settings()
