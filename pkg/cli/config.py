"""
CLI Configuration
Environment variables and defaults for the morphguard command line.
"""

import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()


class Settings:
    """Process-wide settings read once from the environment (and .env)."""

    APP_NAME = "morphguard"
    APP_VERSION = "1.0.0"

    # Default output root when neither --out nor the config names one
    OUT_ROOT = Path(os.getenv("MORPHGUARD_OUT_ROOT", "runs"))

    # Thread cap for crafting, generation and evaluation (--workers overrides)
    WORKERS = max(1, int(os.getenv("MORPHGUARD_WORKERS", "1")))

    # Logging
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
    LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    BASE_DIR = Path(__file__).resolve().parent.parent


settings = Settings()
