"""Environment configuration loaded from `.env`."""

import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv

MAX_DEFAULT_THREADS = 8


@dataclass(frozen=True)
class Settings:
    threads: int
    output_root: Path
    log_level: str


def load_settings(env_file: str = None) -> Settings:
    """
    Read REVODE_* variables, loading a `.env` file first if one exists.

    Args:
        env_file: Optional explicit path to a dotenv file

    Returns:
        Settings: Resolved worker cap, output root and log level
    """
    load_dotenv(env_file)

    default_threads = min(os.cpu_count() or 1, MAX_DEFAULT_THREADS)
    raw_threads = os.getenv("REVODE_THREADS")
    try:
        threads = int(raw_threads) if raw_threads else default_threads
    except ValueError:
        threads = default_threads
    threads = max(threads, 1)

    return Settings(
        threads=threads,
        output_root=Path(os.getenv("REVODE_OUTPUT_DIR", "output")),
        log_level=os.getenv("REVODE_LOG_LEVEL", "INFO").upper(),
    )
