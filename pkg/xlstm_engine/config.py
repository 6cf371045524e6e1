import logging
import os
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()


def _env_flag(name: str, default: str) -> bool:
    return os.getenv(name, default).lower() == "true"


class Config:
    """Engine configuration with performance settings"""

    # Numerics
    CHECKED_MODE = _env_flag("XLSTM_CHECKED_MODE", "false")
    DEFAULT_PRECISION = os.getenv("XLSTM_PRECISION", "float32")
    DEFAULT_CHUNK_SIZE = int(os.getenv("XLSTM_CHUNK_SIZE", "64"))
    NUM_THREADS = int(os.getenv("XLSTM_NUM_THREADS", "1"))
    SEED = int(os.getenv("XLSTM_SEED", "0"))

    # Storage
    CHECKPOINT_DIR = Path(os.getenv("XLSTM_CHECKPOINT_DIR", "checkpoints"))
    RUNS_DIR = Path(os.getenv("XLSTM_RUNS_DIR", "runs"))

    # Benchmark settings
    BENCH_REPEATS = int(os.getenv("BENCH_REPEATS", "5"))
    BENCH_WARMUPS = int(os.getenv("BENCH_WARMUPS", "2"))
    BENCH_D_MODEL = int(os.getenv("BENCH_D_MODEL", "512"))
    BENCH_NUM_BLOCKS = int(os.getenv("BENCH_NUM_BLOCKS", "8"))
    BENCH_NUM_HEADS = int(os.getenv("BENCH_NUM_HEADS", "4"))
    BENCH_VOCAB_SIZE = int(os.getenv("BENCH_VOCAB_SIZE", "257"))
    DECODE_ALLOC_THRESHOLD_MB = float(os.getenv("DECODE_ALLOC_THRESHOLD_MB", "32"))

    # Performance monitoring settings
    ENABLE_PERFORMANCE_MONITORING = _env_flag("ENABLE_PERFORMANCE_MONITORING", "true")
    PERFORMANCE_METRICS_MAX_HISTORY = int(os.getenv("PERFORMANCE_METRICS_MAX_HISTORY", "1000"))
    PERFORMANCE_LOG_SLOW_OPERATIONS = _env_flag("PERFORMANCE_LOG_SLOW_OPERATIONS", "true")
    SLOW_OPERATION_THRESHOLD_MS = int(os.getenv("SLOW_OPERATION_THRESHOLD_MS", "5000"))

    # Resource limits
    MAX_MEMORY_MB = int(os.getenv("MAX_MEMORY_MB", "4096"))
    MAX_CPU_PERCENT = int(os.getenv("MAX_CPU_PERCENT", "80"))

    # Training
    TRAIN_LOG_WINDOW = int(os.getenv("TRAIN_LOG_WINDOW", "50"))
    TRAIN_LOG_EVERY = int(os.getenv("TRAIN_LOG_EVERY", "25"))
    TRAIN_PROGRESS_BAR = _env_flag("TRAIN_PROGRESS_BAR", "false")

    # Service
    MODEL_CHECKPOINT = os.getenv("MODEL_CHECKPOINT", "")
    MODEL_CONFIG_FILE = os.getenv("MODEL_CONFIG_FILE", "")
    MAX_SESSIONS = int(os.getenv("MAX_SESSIONS", "64"))
    MAX_NEW_TOKENS = int(os.getenv("MAX_NEW_TOKENS", "512"))

    # Logging settings
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

    @classmethod
    def get_model_mode(cls) -> str:
        """Get model mode for display"""
        if cls.MODEL_CHECKPOINT and Path(cls.MODEL_CHECKPOINT).exists():
            return "CHECKPOINT"
        return "RANDOM-INIT"

    @classmethod
    def get_bench_model_config(cls):
        """Desk-scale model config used by the inference benchmarks"""
        from xlstm_engine.models import ModelConfig

        return ModelConfig(
            vocab_size=cls.BENCH_VOCAB_SIZE,
            num_blocks=cls.BENCH_NUM_BLOCKS,
            d_model=cls.BENCH_D_MODEL,
            num_heads=cls.BENCH_NUM_HEADS,
            precision=cls.DEFAULT_PRECISION,
            chunk_size=cls.DEFAULT_CHUNK_SIZE,
        )

    @classmethod
    def get_performance_config(cls) -> dict:
        """Get performance-related configuration as dict"""
        return {
            "monitoring_enabled": cls.ENABLE_PERFORMANCE_MONITORING,
            "metrics_history": cls.PERFORMANCE_METRICS_MAX_HISTORY,
            "slow_operation_threshold_ms": cls.SLOW_OPERATION_THRESHOLD_MS,
            "checked_mode": cls.CHECKED_MODE,
            "num_threads": cls.NUM_THREADS,
            "resource_limits": {
                "max_memory_mb": cls.MAX_MEMORY_MB,
                "max_cpu_percent": cls.MAX_CPU_PERCENT,
            },
            "bench": {
                "repeats": cls.BENCH_REPEATS,
                "warmups": cls.BENCH_WARMUPS,
                "decode_alloc_threshold_mb": cls.DECODE_ALLOC_THRESHOLD_MB,
            },
        }


config = Config()


def configure_logging(level: str = None):
    """Apply LOG_LEVEL to the root logger once per process."""
    logging.basicConfig(
        level=(level or config.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _parse_value(raw: str):
    value = raw.strip()
    if value.lower() in ("none", "null", ""):
        return None
    return value


def read_model_config(path):
    """Read a flat `key = value` model config file; unknown keys are rejected."""
    from pydantic import ValidationError

    from xlstm_engine.errors import ConfigurationError
    from xlstm_engine.models import ModelConfig

    values = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in ModelConfig.model_fields:
            raise ConfigurationError(f"{path}:{lineno}: unknown config key '{key}'")
        values[key] = _parse_value(raw)

    try:
        return ModelConfig(**{k: v for k, v in values.items() if v is not None or k == "eod_token_id"})
    except ValidationError as e:
        raise ConfigurationError(f"{path}: {e}") from e


def write_model_config(cfg, path):
    """Write `cfg` in the flat `key = value` format read by read_model_config."""
    lines = []
    for key, value in cfg.model_dump(mode="json").items():
        if value is None:
            value = "none"
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
