"""
Environment configuration
Values come from the process environment, optionally seeded from a .env file
"""

import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from errors import InvalidConfigError

load_dotenv()

REPO_DIR = Path(__file__).parent.parent


def data_dir() -> Path:
    return Path(os.getenv("ARCHERSIM_DATA_DIR", str(REPO_DIR / "data")))


def profiles_dir() -> Path:
    return data_dir() / "profiles"


def reports_dir() -> Path:
    return Path(os.getenv("ARCHERSIM_REPORTS_DIR", str(data_dir() / "reports")))


def log_level(default: str = "WARNING") -> str:
    return os.getenv("ARCHERSIM_LOG_LEVEL", default).upper()


def env_seed() -> Optional[int]:
    """ARCHERSIM_SEED, when set, overrides any seed given on the command line"""
    raw = os.getenv("ARCHERSIM_SEED")
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise InvalidConfigError(f"ARCHERSIM_SEED must be an integer, got '{raw}'")
