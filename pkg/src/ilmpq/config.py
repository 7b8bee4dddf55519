"""Run configuration: a JSON document validated against a closed schema.

Unknown keys are rejected at every level.  Relative dataset and profile
paths resolve against the directory holding the config file.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .assignment import SchemeRatio
from .data import Dataset, load_idx_dataset, make_blobs
from .errors import ConfigError
from .hw import MEASURED_RESNET18, Anchor, HwProfile
from .train import TrainConfig

_RATIO = {"type": "string", "pattern": r"^\s*[0-9.eE+-]+\s*:\s*[0-9.eE+-]+\s*:\s*[0-9.eE+-]+\s*$"}
_POS_INT = {"type": "integer", "minimum": 1}

_LAYER = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["dense", "conv2d", "relu", "maxpool", "avgpool", "flatten"]},
        "out": _POS_INT,
        "kernel": _POS_INT,
        "stride": _POS_INT,
        "padding": {"type": "integer", "minimum": 0},
        "size": _POS_INT,
    },
}

_BLOBS = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"const": "blobs"},
        "n_train": _POS_INT,
        "n_test": _POS_INT,
        "n_features": _POS_INT,
        "n_classes": {"type": "integer", "minimum": 2},
        "spread": {"type": "number", "exclusiveMinimum": 0},
        "std": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer"},
    },
}

_IDX = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "train_images", "train_labels", "test_images", "test_labels"],
    "properties": {
        "kind": {"const": "idx"},
        "train_images": {"type": "string"},
        "train_labels": {"type": "string"},
        "test_images": {"type": "string"},
        "test_labels": {"type": "string"},
        "n_classes": {"type": "integer", "minimum": 2},
        "limit_train": _POS_INT,
        "limit_test": _POS_INT,
    },
}

_TRAIN = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "epochs": _POS_INT,
        "batch_size": _POS_INT,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "maximum": 1},
        "lr_milestones": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "lr_gamma": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "act_bits": {"enum": [4, 8]},
        "act_clip": {"type": "number", "exclusiveMinimum": 0},
        "augment": {"type": "boolean"},
        "calib_size": _POS_INT,
        "hessian_iters": _POS_INT,
        "hessian_tol": {"type": "number", "exclusiveMinimum": 0},
        "bypass_quant": {"type": "boolean"},
    },
}

_PROFILE = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "lut_lanes", "dsp_lanes"],
    "properties": {
        "name": {"type": "string"},
        "lut_lanes": {"type": "number"},
        "dsp_lanes": {"type": "number"},
        "clock": {"type": "number"},
        "fixed_overhead": {"type": "number"},
        "dsp_cost8": {"type": "number"},
    },
}

_ANCHOR = {
    "type": "object",
    "additionalProperties": False,
    "required": ["ratio", "latency_ms"],
    "properties": {
        "ratio": _RATIO,
        "latency_ms": {"type": "number", "exclusiveMinimum": 0},
        "first_last_fixed8": {"type": "boolean"},
        "label": {"type": "string"},
    },
}

_HARDWARE = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "profile": {"oneOf": [{"type": "string"}, _PROFILE]},
        "device": {"enum": sorted(MEASURED_RESNET18)},
        "shapes": {"enum": ["resnet18", "model"]},
        "fixed8": {"type": "number", "minimum": 0, "maximum": 100},
        "step": {"type": "number", "exclusiveMinimum": 0},
        "first_last_fixed8": {"type": "boolean"},
        "anchors": {"type": "array", "items": _ANCHOR},
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "ratio": _RATIO,
        "dataset": {"oneOf": [_BLOBS, _IDX]},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["layers"],
            "properties": {"layers": {"type": "array", "minItems": 1, "items": _LAYER}},
        },
        "train": _TRAIN,
        "hardware": _HARDWARE,
    },
}

_VALIDATOR = jsonschema.Draft202012Validator(SCHEMA)


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path)

    @property
    def seed(self) -> int:
        return self.raw.get("seed", 0)

    @property
    def ratio(self) -> SchemeRatio:
        return SchemeRatio.parse(self.raw.get("ratio", "60:35:5"))

    @property
    def hardware(self) -> dict:
        return self.raw.get("hardware", {})

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def train_config(self, workers: int = 1) -> TrainConfig:
        return TrainConfig(**self.raw.get("train", {}), seed=self.seed, workers=workers)

    def layers(self) -> list[dict]:
        if "model" not in self.raw:
            raise ConfigError("config has no model section")
        return self.raw["model"]["layers"]

    def datasets(self) -> tuple[Dataset, Dataset]:
        """``(train, test)`` splits."""
        d = self.raw.get("dataset")
        if d is None:
            raise ConfigError("config has no dataset section")
        if d["kind"] == "blobs":
            n_train, n_test = d.get("n_train", 2000), d.get("n_test", 1000)
            full = make_blobs(n_train + n_test, d.get("n_features", 16), d.get("n_classes", 10),
                              d.get("spread", 3.0), d.get("std", 1.0), d.get("seed", self.seed))
            return full.subset(slice(0, n_train)), full.subset(slice(n_train, None))
        nc = d.get("n_classes", 10)
        train = load_idx_dataset(self.resolve(d["train_images"]), self.resolve(d["train_labels"]), nc)
        test = load_idx_dataset(self.resolve(d["test_images"]), self.resolve(d["test_labels"]), nc)
        if "limit_train" in d:
            train = train.subset(slice(0, d["limit_train"]))
        if "limit_test" in d:
            test = test.subset(slice(0, d["limit_test"]))
        return train, test

    def profile(self) -> HwProfile | None:
        p = self.hardware.get("profile")
        if p is None:
            return None
        if isinstance(p, str):
            return load_profile(self.resolve(p))
        return HwProfile.from_dict(p)

    def anchors(self) -> list[Anchor]:
        hw = self.hardware
        if "anchors" in hw:
            return [Anchor(SchemeRatio.parse(a["ratio"]), a["latency_ms"] / 1e3,
                           a.get("first_last_fixed8", False), a.get("label", ""))
                    for a in hw["anchors"]]
        if "device" in hw:
            return list(MEASURED_RESNET18[hw["device"]])
        raise ConfigError("hardware section needs anchors or a device")


def validate(raw) -> None:
    errors = sorted(_VALIDATOR.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {e.message}")


def parse_config(raw: dict, base_dir=".") -> RunConfig:
    validate(raw)
    cfg = RunConfig(raw, Path(base_dir))
    cfg.ratio  # parse eagerly so a bad ratio fails before any work
    if "train" in raw:
        cfg.train_config()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg})") from None
    return parse_config(raw, path.parent)


def load_profile(path) -> HwProfile:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg})") from None
    errors = list(jsonschema.Draft202012Validator(_PROFILE).iter_errors(raw))
    if errors:
        raise ConfigError(f"profile invalid: {errors[0].message}")
    return HwProfile.from_dict(raw)
