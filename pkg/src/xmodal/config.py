"""``key = value`` run configuration files.

Every accepted key is listed in :data:`DEFAULTS` with its default; unknown
keys are rejected. Values are parsed to the type of their default. Lines
starting with ``#`` and blank lines are ignored.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigError

ALL_TASKS = "CMCL,CLCL,ITM,MLM,PLM,vPLM,MT,mMMT"

DEFAULTS: dict[str, Any] = {
    # ModelConfig fields
    "model.d_model": 64,
    "model.n_heads": 2,
    "model.n_layers_text": 2,
    "model.n_layers_visual": 2,
    "model.n_layers_fusion": 2,
    "model.n_layers_decoder": 2,
    "model.vocab_size": 1000,
    "model.max_text_len": 32,
    "model.image_side": 32,
    "model.patch_size": 8,
    "model.channels": 3,
    "model.ffn_mult": 4,
    "model.init_seed": 0,
    # learning-rate schedule: linear warmup then cosine decay to floor_lr
    "schedule.base_lr": 1e-4,
    "schedule.warmup_steps": 250,
    "schedule.total_steps": 5000,
    "schedule.floor_lr": 1e-6,
    # AdamW and clipping
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    "optim.eps": 1e-8,
    "optim.weight_decay": 0.1,
    "optim.clip_norm": 1.0,
    # objectives
    "tasks.active": ALL_TASKS,
    "tasks.mlm_rate": 0.15,
    "tasks.mmmt_mask_rate": 0.3,
    "tasks.mlm_weight": 1.0,
    "tasks.mlm_image": True,  # False: MLM on the text-only stream without image
    # synthetic corpus
    "data.seed": 0,
    "data.n_pairs": 2000,
    "data.n_eval": 256,
    "data.n_attr": 8,
    "data.n_obj": 8,
    # training loop
    "train.seed": 0,
    "train.batch_size": 32,
    "train.merge_width": 0,  # 0 = number of active tasks
    "train.workers": 1,
    # outputs
    "io.checkpoint_dir": "runs/default",
    "io.log_every": 1,
    "io.save_every": 0,  # 0 = only at the end
}


def _parse(key: str, raw: str) -> Any:
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


class RunConfig(Mapping[str, Any]):
    """Immutable mapping of every documented key to its value."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        merged = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _parse(k, v) if isinstance(v, str) else _coerce(k, v)
        self._values = merged
        self._validate()

    def _validate(self):
        v = self._values
        for k in ("train.batch_size", "io.log_every", "train.workers", "data.n_pairs"):
            if v[k] < 1:
                raise ConfigError(f"{k} must be >= 1")
        if v["train.merge_width"] < 0 or v["io.save_every"] < 0 or v["data.n_eval"] < 0:
            raise ConfigError("merge_width, save_every and n_eval must be >= 0")
        if not self.active_tasks():
            raise ConfigError("tasks.active is empty")

    # Mapping protocol
    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def replace(self, **changes) -> "RunConfig":
        """Copy with keys given as ``section__name=value``."""
        vals = dict(self._values)
        for k, v in changes.items():
            vals[k.replace("__", ".", 1)] = v
        return RunConfig(vals)

    def with_overrides(self, pairs: Iterable[str]) -> "RunConfig":
        vals = dict(self._values)
        vals.update(parse_lines(pairs, origin="override"))
        return RunConfig(vals)

    def active_tasks(self):
        from .objectives import TaskKind

        names = [s for s in str(self._values["tasks.active"]).split(",") if s.strip()]
        try:
            return sorted({TaskKind.parse(s) for s in names})
        except Exception as e:
            raise ConfigError(str(e)) from None

    def model_config(self):
        from .model import ModelConfig

        fields = {k.split(".", 1)[1]: v for k, v in self._values.items()
                  if k.startswith("model.") and k != "model.init_seed"}
        return ModelConfig(**fields)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self._values.items()))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_file(cls, path: str | Path, overrides: Iterable[str] = ()) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from None
        vals = parse_lines(text.splitlines(), origin=str(path))
        vals.update(parse_lines(overrides, origin="override"))
        return cls(vals)


def _coerce(key: str, v: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        return bool(v)
    if isinstance(default, int) and not isinstance(v, bool):
        if float(v) != int(v):
            raise ConfigError(f"{key}: expected an integer, got {v!r}")
        return int(v)
    if isinstance(default, float):
        return float(v)
    return v


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_lines(lines: Iterable[str], origin: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in DEFAULTS:
            raise ConfigError(f"{origin}:{n}: unknown config key {k!r}")
        out[k] = v
    return out
