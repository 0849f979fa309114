"""Run configuration: ``key = value`` files, shipped named configs, and override merging.

Precedence, lowest to highest: built-in defaults, config file, CLI flags,
``key=value`` overrides.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from rseq.errors import ConfigError
from rseq.training import OptimizerConfig

TASKS = ("charlm", "wordlm", "copy", "mnist", "music")
BUILTIN_PREFIX = "builtin:"


def _optional_float(text: str) -> float | None:
    return None if text.lower() in ("none", "") else float(text)


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    task: str = "charlm"
    data_dir: str = "builtin:smoke"
    # model
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 128
    window: int = 7
    cell_kind: str = "gru"
    dropout: float = 0.0
    tie_embeddings: bool = False
    # optimisation
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_candidates: list[float] = field(default_factory=list)
    clip_norm: float | None = 0.5
    anneal_factor: float = 0.5
    patience: int = 1
    max_epochs: int = 10
    # batching
    batch_size: int = 32
    seq_len: int = 64
    steps_per_epoch: int = 0
    val_batches: int = 4
    # copy task
    copy_symbols: int = 8
    copy_payload: int = 10
    copy_blank: int = 40
    # synthetic pixel digits (used when data_dir = synthetic)
    synthetic_train: int = 2000
    synthetic_test: int = 500
    # run
    seed: int = 0
    precision: str = "f32"
    out_dir: str = "runs/default"
    threads: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.optimizer == "adaptive-moment":
            self.optimizer = "adam"
        for name in ("batch_size", "seq_len", "val_batches"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.steps_per_epoch < 0 or self.threads < 0:
            raise ConfigError("steps_per_epoch and threads must be >= 0")
        self.optimizer_config()

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(kind=self.optimizer, lr=self.lr, lr_candidates=list(self.lr_candidates),
                               clip_norm=self.clip_norm, anneal_factor=self.anneal_factor,
                               patience=self.patience, max_epochs=self.max_epochs)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, list):
                text = ", ".join(repr(v) for v in value)
            elif value is None:
                text = "none"
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _bool,
    "float | None": _optional_float,
    "list[float]": _float_list,
}
_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_value(key: str, text: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return _PARSERS[_FIELD_TYPES[key]](text.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, value)
    return values


def shipped_configs() -> list[str]:
    root = resources.files("rseq") / "configs"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def resolve_config_path(name_or_path: str):
    p = Path(name_or_path)
    if p.exists():
        return p
    stem = p.name[:-4] if p.name.endswith(".cfg") else p.name
    candidate = resources.files("rseq") / "configs" / f"{stem}.cfg"
    if candidate.is_file():
        return candidate
    raise ConfigError(f"no config file {name_or_path!r}; shipped configs: {', '.join(shipped_configs())}")


def load_run_config(path: str | None = None, flags: dict | None = None,
                    overrides: list[str] | None = None, base: dict | None = None) -> RunConfig:
    """``base`` (e.g. the run recorded in a checkpoint) sits below the config file."""
    values: dict = dict(base or {})
    if path is not None:
        cfg_path = resolve_config_path(path)
        values.update(parse_config_text(cfg_path.read_text(encoding="utf-8"), str(path)))
    for key, value in (flags or {}).items():
        if value is not None:
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        values[key.strip()] = parse_value(key.strip(), value)
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def resolve_data_dir(data_dir: str) -> Path:
    if data_dir.startswith(BUILTIN_PREFIX):
        return Path(str(resources.files("rseq") / "corpora" / data_dir[len(BUILTIN_PREFIX):]))
    return Path(data_dir)
