"""Configuration for kvx2l."""

import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict

from kvx2l.errors import ConfigurationError

logger = logging.getLogger(__name__)

# Cold-store root
CACHE_DIR = os.getenv("KVX2L_CACHE_DIR", "./kvx2l-cache")

# Bi-level compression (2x low / 32x high unless overridden)
ALPHA_LOW = int(os.getenv("KVX2L_ALPHA_LOW", "2"))
ALPHA_HIGH = int(os.getenv("KVX2L_ALPHA_HIGH", "32"))
TOPK = int(os.getenv("KVX2L_TOPK", "3"))
ORACLE = os.getenv("KVX2L_ORACLE", "cosine")

# Chunking: contiguous 10-frame chunks
CHUNK_FRAMES = int(os.getenv("KVX2L_CHUNK_FRAMES", "10"))
TOKENS_PER_FRAME = int(os.getenv("KVX2L_TOKENS_PER_FRAME", "4"))

SEED = int(os.getenv("KVX2L_SEED", "0"))

# Decoding
MAX_NEW_TOKENS = int(os.getenv("KVX2L_MAX_NEW", "1"))
KEEP_ORIGINAL_POSITIONS = os.getenv("KVX2L_KEEP_ORIGINAL_POSITIONS", "false").lower() == "true"

# Harness
MEMORY_BUDGET_MB = float(os.getenv("KVX2L_MEMORY_BUDGET_MB", "1024"))
WORKERS = int(os.getenv("KVX2L_WORKERS", "1"))
ORACLE_NOISE = float(os.getenv("KVX2L_ORACLE_NOISE", "0.0"))

# Logging
LOG_LEVEL = os.getenv("KVX2L_LOG_LEVEL", "INFO")

# Engine defaults for the toy backbone
ENGINE_DEFAULTS = {
    "layers": int(os.getenv("KVX2L_LAYERS", "2")),
    "heads": int(os.getenv("KVX2L_HEADS", "4")),
    "head_dim": int(os.getenv("KVX2L_HEAD_DIM", "32")),
    "vocab": int(os.getenv("KVX2L_VOCAB", "64")),
    "mode": os.getenv("KVX2L_ENGINE_MODE", "averaging"),
}

ORACLE_CHOICES = ("cosine", "attention", "random", "lastn", "uniform", "perfect")


@dataclass
class PipelineConfig:
    """Settings shared by prefill, query, bench, niah and sweep."""

    alpha_low: int = ALPHA_LOW
    alpha_high: int = ALPHA_HIGH
    topk: int = TOPK
    oracle: str = ORACLE
    chunk_frames: int = CHUNK_FRAMES
    tokens_per_frame: int = TOKENS_PER_FRAME
    seed: int = SEED
    cache_dir: str = CACHE_DIR
    keep_original_positions: bool = KEEP_ORIGINAL_POSITIONS
    oracle_noise: float = ORACLE_NOISE
    max_new: int = MAX_NEW_TOKENS
    memory_budget_mb: float = MEMORY_BUDGET_MB

    def validate(self) -> "PipelineConfig":
        """Raise ConfigurationError on the first invalid field."""
        if self.alpha_low < 1 or self.alpha_high < 1:
            raise ConfigurationError(
                f"compression ratios must be >= 1, got alpha_low={self.alpha_low}, alpha_high={self.alpha_high}"
            )
        if self.alpha_low > self.alpha_high:
            raise ConfigurationError(
                f"alpha_low ({self.alpha_low}) must not exceed alpha_high ({self.alpha_high})"
            )
        if self.topk < 0:
            raise ConfigurationError(f"topk must be >= 0, got {self.topk}")
        if self.oracle not in ORACLE_CHOICES:
            raise ConfigurationError(f"unknown oracle '{self.oracle}', expected one of {ORACLE_CHOICES}")
        if self.chunk_frames < 1 or self.tokens_per_frame < 1:
            raise ConfigurationError("chunk_frames and tokens_per_frame must be >= 1")
        if self.max_new < 1:
            raise ConfigurationError(f"max_new must be >= 1, got {self.max_new}")
        if self.oracle_noise < 0:
            raise ConfigurationError(f"oracle_noise must be >= 0, got {self.oracle_noise}")
        if self.memory_budget_mb <= 0:
            raise ConfigurationError(f"memory_budget_mb must be > 0, got {self.memory_budget_mb}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# Flags accepted in a config file and the type each coerces to.
# Keys mirror the CLI long options with dashes replaced by underscores.
CONFIG_FILE_KEYS = {f.name: f.type for f in fields(PipelineConfig)}
CONFIG_FILE_KEYS.update({
    "layers": int,
    "heads": int,
    "head_dim": int,
    "vocab": int,
    "engine_mode": str,
    "out": str,
    "repetitions": int,
    "workers": int,
    "context_tokens": int,
    "trials": int,
    "noise_scale": float,
    "strict_timing": bool,
    "verbose": bool,
})


def _coerce(value: str, kind: Any, key: str, where: str) -> Any:
    # dataclass field types may be strings under postponed annotations
    name = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    try:
        if name == "bool":
            lowered = value.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return lowered in ("true", "1", "yes")
        if name == "int":
            return int(value)
        if name == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigurationError(f"{where}: cannot read '{value}' as {name} for key '{key}'")


def load_config_file(path: str) -> Dict[str, Any]:
    """Parse a file of `key = value` lines into a dict keyed by option name."""
    values: Dict[str, Any] = {}
    try:
        with open(path, "r", encoding="utf-8") as handle:
            lines = handle.readlines()
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path}: {e}")

    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{path}:{lineno}"
        if "=" not in line:
            raise ConfigurationError(f"{where}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key not in CONFIG_FILE_KEYS:
            raise ConfigurationError(f"{where}: unknown key '{key}'")
        values[key] = _coerce(value, CONFIG_FILE_KEYS[key], key, where)

    logger.debug(f"Loaded {len(values)} settings from {path}")
    return values
