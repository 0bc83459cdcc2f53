import os
import json
import hashlib
import logging
from datetime import datetime
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import pytz
from dotenv import load_dotenv, dotenv_values, find_dotenv
from pydantic import BaseModel, Field, field_validator, model_validator

# ----------------------
# Environment
# ----------------------
# Переменные SSGL_* берутся из окружения процесса, затем из файла .env
_DOTENV_PATH = find_dotenv(usecwd=True) or os.path.join(os.path.dirname(__file__), ".env")
load_dotenv(dotenv_path=_DOTENV_PATH, override=False)
_DOTENV_VALUES = dotenv_values(dotenv_path=_DOTENV_PATH) if os.path.exists(_DOTENV_PATH) else {}

logger = logging.getLogger("SSGL")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

COMMANDS = ("fit", "cv", "gam", "interact", "debias", "predict", "simulate")

ENV_DEFAULTS = {
    "SSGL_THREADS": "",
    "SSGL_LOG_LEVEL": "INFO",
    "SSGL_RUN_ACCEPTANCE": "0",
}


def _unquote(raw: Optional[str]) -> str:
    value = (raw or "").strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        value = value[1:-1].strip()
    return value


def ssgl_env(key: str) -> str:
    """Значение переменной SSGL_*; пустое значение заменяется умолчанием из ENV_DEFAULTS"""
    if key not in ENV_DEFAULTS:
        raise KeyError(f"unknown SSGL setting {key!r}")
    value = _unquote(os.getenv(key)) or _unquote(_DOTENV_VALUES.get(key))
    return value or ENV_DEFAULTS[key]


def unknown_env_keys() -> List[str]:
    """Ключи SSGL_* из окружения и .env, которых пакет не знает (обычно опечатки)"""
    seen = set(_DOTENV_VALUES) | {k for k in os.environ if k.startswith("SSGL_")}
    return sorted(k for k in seen if k.startswith("SSGL_") and k not in ENV_DEFAULTS)


def setup_logging(level: Optional[str] = None) -> None:
    """Настраивает логирование один раз для всего процесса"""
    level_name = (level or ssgl_env("SSGL_LOG_LEVEL")).upper()
    logging.basicConfig(format=LOG_FORMAT, level=getattr(logging, level_name, logging.INFO))
    logging.captureWarnings(True)
    logger.debug("Loaded .env from: %s", _DOTENV_PATH)
    for key in unknown_env_keys():
        logger.warning("Unknown setting %s is ignored", key)


def env_threads(default: int = 1) -> int:
    """Число потоков из SSGL_THREADS; некорректное значение игнорируется"""
    raw = ssgl_env("SSGL_THREADS")
    if raw.isdigit() and int(raw) > 0:
        return int(raw)
    if raw:
        logger.warning("Ignoring invalid SSGL_THREADS=%r", raw)
    return default


def utc_now_iso() -> str:
    return datetime.now(pytz.utc).isoformat()


# ----------------------
# Run configuration
# ----------------------

class RunConfig(BaseModel):
    """Параметры одного запуска CLI. Проверяются до начала вычислений."""

    command: Literal["fit", "cv", "gam", "interact", "debias", "predict", "simulate"]
    input_path: Optional[str] = None
    response: Optional[str] = None
    group_map_path: Optional[str] = None
    model_path: Optional[str] = None
    grid_path: Optional[str] = None
    lambda0_ladder: Tuple[float, ...] = tuple(float(v) for v in range(1, 101))
    lambda1: float = 1.0
    df_set: Tuple[int, ...] = (2, 3, 4)
    basis_kind: Literal["natural", "bspline"] = "natural"
    d_star: int = 2
    k_folds: int = 10
    alpha: float = 0.05
    seed: int = 0
    output_dir: str = "out"
    hierarchy: bool = False
    unpenalized: Tuple[str, ...] = ()
    one_se_rule: bool = False
    method: Literal["ssgl", "group_lasso"] = "ssgl"
    scenario: Optional[str] = None
    n: Optional[int] = None
    p: Optional[int] = None
    rho: float = 0.0
    replicates: int = 1
    threads: int = Field(default=1, ge=1)
    xlsx: bool = False

    @field_validator("lambda0_ladder")
    @classmethod
    def _ladder_increasing(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if not v:
            raise ValueError("lambda0 ladder is empty")
        if any(x <= 0 for x in v):
            raise ValueError("lambda0 ladder values must be positive")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("lambda0 ladder must be strictly increasing")
        return v

    @field_validator("df_set")
    @classmethod
    def _df_positive(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if not v or any(d < 1 for d in v):
            raise ValueError("df set must contain positive integers")
        return v

    @field_validator("alpha")
    @classmethod
    def _alpha_open_interval(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        return v

    @field_validator("k_folds")
    @classmethod
    def _folds(cls, v: int) -> int:
        if v < 2:
            raise ValueError("need at least 2 folds")
        return v

    @model_validator(mode="after")
    def _inputs_present(self) -> "RunConfig":
        if self.lambda1 <= 0 or (self.method == "ssgl" and self.lambda1 > min(self.lambda0_ladder)):
            raise ValueError("lambda1 must be positive and not exceed min(lambda0 ladder)")
        if self.d_star < 1:
            raise ValueError("d_star must be >= 1")
        needs_input = {"fit", "cv", "gam", "interact", "debias", "predict"}
        if self.command in needs_input and not self.input_path:
            raise ValueError(f"command {self.command!r} requires --input")
        if self.command in needs_input - {"predict"} and not self.response:
            raise ValueError(f"command {self.command!r} requires --response")
        if self.command == "predict" and not self.model_path:
            raise ValueError("predict requires --model")
        if self.command == "simulate" and not self.scenario:
            raise ValueError("simulate requires --scenario")
        return self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def provenance(self) -> dict:
        return {
            "config": self.model_dump(mode="json"),
            "config_hash": self.config_hash(),
            "seed": self.seed,
            "created_at": utc_now_iso(),
        }

    def ensure_output_dir(self) -> Path:
        path = Path(self.output_dir)
        path.mkdir(parents=True, exist_ok=True)
        return path


def parse_list(raw: Optional[str], cast=float) -> List:
    """Разбирает список через запятую; поддерживает диапазон вида 1:100:1"""
    if raw is None or raw.strip() == "":
        return []
    raw = raw.strip()
    if ":" in raw and "," not in raw:
        parts = [float(x) for x in raw.split(":")]
        start, stop = parts[0], parts[1]
        step = parts[2] if len(parts) > 2 else 1.0
        count = int(round((stop - start) / step)) + 1
        return [cast(start + i * step) for i in range(count)]
    return [cast(x.strip()) for x in raw.split(",") if x.strip()]
