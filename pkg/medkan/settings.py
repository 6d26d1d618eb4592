"""Process-wide settings loaded from the environment (and an optional .env)."""
from __future__ import annotations

import os
from dataclasses import dataclass

from dotenv import load_dotenv

load_dotenv()

MIN_BENCH_WARMUP = 5
MIN_BENCH_ITERS = 30


def _get_bool(key: str, default: bool) -> bool:
    value = os.getenv(key)
    if value is None:
        return default
    return value.strip().lower() in {"1", "true", "yes", "on"}


def _get_int(key: str, default: int, min_value: int | None = None) -> int:
    """Get integer from environment with validation."""
    value = os.getenv(key)
    if value is None:
        return default

    try:
        int_value = int(value.strip())
    except (ValueError, AttributeError) as e:
        raise ValueError(
            f"Environment variable {key}='{value}' is not a valid integer "
            f"(default would be {default})"
        ) from e

    if min_value is not None and int_value < min_value:
        raise ValueError(
            f"Environment variable {key}={int_value} must be >= {min_value}"
        )

    return int_value


@dataclass(frozen=True)
class Settings:
    """Centralised runtime settings loaded from environment variables."""

    threads: int = _get_int("MEDKAN_THREADS", os.cpu_count() or 1, min_value=1)
    log_level: str = os.getenv("LOG_LEVEL", "INFO").upper()
    data_dir: str = os.getenv("MEDKAN_DATA_DIR", "data")
    runs_dir: str = os.getenv("MEDKAN_RUNS_DIR", "runs")
    gik_token_limit: int = _get_int("MEDKAN_GIK_TOKEN_LIMIT", 256, min_value=1)
    eval_batch_size: int = _get_int("MEDKAN_EVAL_BATCH_SIZE", 256, min_value=1)
    bench_warmup: int = _get_int("MEDKAN_BENCH_WARMUP", MIN_BENCH_WARMUP, min_value=0)
    bench_iters: int = _get_int("MEDKAN_BENCH_ITERS", MIN_BENCH_ITERS, min_value=1)
    parallel_min_rows: int = _get_int("MEDKAN_PARALLEL_MIN_ROWS", 256, min_value=1)
    prefetch: bool = _get_bool("MEDKAN_PREFETCH", True)
    progress_bar: bool = _get_bool("MEDKAN_PROGRESS", False)

    @property
    def hardware_threads(self) -> int:
        return os.cpu_count() or 1


settings = Settings()


def _validate_settings() -> None:
    """Validate settings for consistency."""
    if settings.bench_warmup < MIN_BENCH_WARMUP:
        raise ValueError(
            f"MEDKAN_BENCH_WARMUP ({settings.bench_warmup}) must be at least "
            f"{MIN_BENCH_WARMUP} warmup iterations"
        )
    if settings.bench_iters < MIN_BENCH_ITERS:
        raise ValueError(
            f"MEDKAN_BENCH_ITERS ({settings.bench_iters}) must be at least "
            f"{MIN_BENCH_ITERS} measured iterations"
        )
    if settings.log_level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
        raise ValueError(f"LOG_LEVEL '{settings.log_level}' is not a logging level name")


_validate_settings()

__all__ = ["MIN_BENCH_ITERS", "MIN_BENCH_WARMUP", "Settings", "settings"]
