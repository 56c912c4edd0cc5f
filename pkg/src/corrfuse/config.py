"""Training configuration and JSON-schema validation for config files."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

import jsonschema

FORMAT_VERSION = 1


class ConfigError(ValueError):
    """A configuration file or object failed validation."""


def validate(obj, schema: dict, what: str) -> None:
    try:
        jsonschema.validate(obj, schema)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"invalid {what} at {where}: {err.message}") from None


def load_json(path, what: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{what} {path} is not valid JSON: {err}") from None


_POS_INT = {"type": "integer", "minimum": 1}
_NUMBER = {"type": "number"}

TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "dim": _POS_INT,
        "hidden": _POS_INT,
        "heads": _POS_INT,
        "leaky_slope": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "batch_size": _POS_INT,
        "eval_batch_size": {"type": ["integer", "null"], "minimum": 1},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "epochs": _POS_INT,
        "patience": _POS_INT,
        "delta": {"type": "number", "exclusiveMinimum": -1},
        "tau": {"type": "number", "minimum": 0, "maximum": 1},
        "cxr_dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "window_length": {"type": "number", "exclusiveMinimum": 0},
    },
}


@dataclass
class TrainConfig:
    """Model sizes and optimization settings; defaults follow the reference setup."""

    dim: int = 64
    hidden: int = 128
    heads: int = 4
    leaky_slope: float = 0.01
    batch_size: int = 64
    eval_batch_size: int | None = None
    learning_rate: float = 1e-3
    epochs: int = 100
    patience: int = 10
    delta: float = 0.6
    tau: float = 0.4
    cxr_dropout_rate: float = 0.3
    seed: int = 0
    window_length: float = 48.0

    def __post_init__(self):
        validate(self.to_dict(), TRAIN_SCHEMA, "train config")
        if self.dim % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide dim ({self.dim})")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        validate(obj, TRAIN_SCHEMA, "train config")
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(load_json(path, "train config"))

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, **asdict(self)}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def effective_eval_batch(self) -> int:
        return self.eval_batch_size or self.batch_size
