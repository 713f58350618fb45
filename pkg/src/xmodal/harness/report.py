"""Metrics report JSON: ``{run_id, config_hash, metrics, per_language}``."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ContractError

_RANGES = {"meanRecall": (0.0, 100.0), "BLEU@4": (0.0, 1.0), "accuracy": (0.0, 1.0)}


def _check(name: str, value: float):
    if not math.isfinite(value):
        raise ContractError(f"metric {name} is not finite")
    base = name.split("/")[-1]
    if base in _RANGES:
        lo, hi = _RANGES[base]
        if not lo <= value <= hi:
            raise ContractError(f"metric {name}={value} outside [{lo}, {hi}]")


@dataclass
class MetricsReport:
    run_id: str
    config_hash: str
    metrics: dict[str, float] = field(default_factory=dict)
    per_language: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.metrics.items():
            _check(k, v)
        for lang, table in self.per_language.items():
            for k, v in table.items():
                _check(f"{lang}/{k}", v)

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "config_hash": self.config_hash,
                "metrics": dict(self.metrics), "per_language": {k: dict(v) for k, v in self.per_language.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        missing = {"run_id", "config_hash", "metrics", "per_language"} - set(d)
        if missing:
            raise ContractError(f"report is missing {sorted(missing)}")
        return cls(str(d["run_id"]), str(d["config_hash"]),
                   {k: float(v) for k, v in d["metrics"].items()},
                   {k: {m: float(x) for m, x in t.items()} for k, t in d["per_language"].items()})

    @classmethod
    def read(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def language_average(per_language: dict[str, dict[str, float]], metric: str) -> float:
    """Unweighted mean of one metric across languages."""
    vals = [t[metric] for t in per_language.values() if metric in t]
    if not vals:
        raise ContractError(f"no language reports {metric}")
    return sum(vals) / len(vals)
