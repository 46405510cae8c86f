"""Experiment configuration: one JSON file, validated against ``CONFIG_SCHEMA``.

Only ``dataset.kind`` is required; everything else falls back to the
defaults shown in ``configs/univariate.json``. For ``dataset.source = "csv"``
the file holds the value columns (1 or 18) followed by a 0/1 label column.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema

from . import nn
from .datasets import KINDS, SYNTHETIC_DEFAULTS, SplitRatios, SyntheticConfig, default_ratios
from .detectors import LAYERS, DetectorSpec, default_specs
from .hec import SCHEMES, DelayModel, default_delay_model
from .policy import DEFAULT_ALPHA, DEFAULT_POLICY_OPTIMIZER, RewardConfig


class ConfigError(ValueError):
    """Configuration does not satisfy the schema."""


_pos = {"type": "number", "exclusiveMinimum": 0}
_unit = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}
_seed = {"type": "integer", "minimum": 0}
_layer_ms = {"type": "object", "additionalProperties": False,
             "properties": {layer: {"type": "number", "minimum": 0} for layer in LAYERS}}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset"],
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": list(KINDS)},
                "source": {"enum": ["synthetic", "csv"]},
                "csv_path": {"type": "string"},
                "csv_header": {"type": "boolean"},
                "weeks": {"type": "integer", "minimum": 3},
                "subjects": {"type": "integer", "minimum": 1},
                "segments_per_subject": {"type": "integer", "minimum": 1},
                "anomaly_fraction": {"type": "number", "minimum": 0, "maximum": 0.5},
                "noise_std": {"type": "number", "minimum": 0},
                "data_seed": _seed,
                "split_seed": _seed,
                "ratios": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {k: _unit for k in ("normal_train", "anomaly_take", "policy_normal")},
                },
            },
            "if": {"properties": {"source": {"const": "csv"}}, "required": ["source"]},
            "then": {"required": ["csv_path"]},
        },
        "detectors": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "init_seed": _seed,
                **{layer: {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "epochs": {"type": "integer", "minimum": 1},
                        "learning_rate": _pos,
                        "batch_size": {"type": "integer", "minimum": 1},
                        "clip_norm": {"oneOf": [_pos, {"type": "null"}]},
                    },
                } for layer in LAYERS},
            },
        },
        "policy": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha": _pos,
                "baseline_decay": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "learning_rate": _pos,
                "optimizer": {"enum": list(nn.OPTIMIZERS)},
                "policy_seed": _seed,
            },
        },
        "delay": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "exec_ms": {"type": "object", "additionalProperties": False,
                            "properties": {k: _layer_ms for k in KINDS}},
                "rtt_ms": _layer_ms,
            },
        },
        "schemes": {"type": "array", "minItems": 1, "uniqueItems": True,
                    "items": {"enum": list(SCHEMES)}},
        "output_dir": {"type": "string", "minLength": 1},
    },
}


def validate(doc: dict) -> None:
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "config"
        raise ConfigError(f"{where}: {exc.message}") from None


@dataclass
class DatasetSection:
    kind: str
    source: str = "synthetic"
    csv_path: str | None = None
    csv_header: bool = False
    weeks: int = 40
    subjects: int = 3
    segments_per_subject: int = 16
    anomaly_fraction: float | None = None
    noise_std: float | None = None
    data_seed: int = 0
    split_seed: int = 0
    ratios: SplitRatios | None = None

    def __post_init__(self):
        if isinstance(self.ratios, dict):
            self.ratios = SplitRatios(**{**asdict(default_ratios(self.kind)), **self.ratios})
        elif self.ratios is None:
            self.ratios = default_ratios(self.kind)
        filled = SyntheticConfig(kind=self.kind, **{k: getattr(self, k) for k in SYNTHETIC_DEFAULTS[self.kind]})
        for key in SYNTHETIC_DEFAULTS[self.kind]:
            setattr(self, key, getattr(filled, key))

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(
            kind=self.kind, weeks=self.weeks, subjects=self.subjects,
            anomaly_fraction=self.anomaly_fraction, noise_std=self.noise_std,
            seed=self.data_seed, segments_per_subject=self.segments_per_subject,
        )

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["ratios"] = asdict(self.ratios)
        return {k: v for k, v in d.items() if v is not None}


@dataclass
class DetectorsSection:
    """Per-layer training overrides on top of the default detector specs."""

    init_seed: int = 0
    overrides: dict[str, dict] = field(default_factory=dict)

    def specs(self, kind: str) -> dict[str, DetectorSpec]:
        out = {}
        for layer, spec in default_specs(kind).items():
            o = self.overrides.get(layer, {})
            t = spec.train
            train = nn.OptimizerConfig(
                t.kind, o.get("learning_rate", t.learning_rate), t.rmsprop_decay,
                o.get("epochs", t.epochs), o.get("batch_size", t.batch_size),
                o.get("clip_norm", t.clip_norm))
            out[layer] = DetectorSpec(spec.family, spec.layer, spec.net, train, spec.loss)
        return out

    def to_dict(self) -> dict:
        return {"init_seed": self.init_seed, **self.overrides}


@dataclass
class PolicySection:
    alpha: float | None = None
    baseline_decay: float = 0.9
    epochs: int = DEFAULT_POLICY_OPTIMIZER.epochs
    learning_rate: float = DEFAULT_POLICY_OPTIMIZER.learning_rate
    optimizer: str = DEFAULT_POLICY_OPTIMIZER.kind
    policy_seed: int = 0

    def reward_config(self, kind: str) -> RewardConfig:
        return RewardConfig(DEFAULT_ALPHA[kind] if self.alpha is None else self.alpha, self.baseline_decay)

    def optimizer_config(self) -> nn.OptimizerConfig:
        return nn.OptimizerConfig(self.optimizer, self.learning_rate, epochs=self.epochs, batch_size=1)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class ExperimentConfig:
    dataset: DatasetSection
    detectors: DetectorsSection = field(default_factory=DetectorsSection)
    policy: PolicySection = field(default_factory=PolicySection)
    delay: DelayModel = field(default_factory=default_delay_model)
    schemes: tuple[str, ...] = SCHEMES
    output_dir: str = "runs/default"

    @property
    def kind(self) -> str:
        return self.dataset.kind

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with every named seed (data, split, init, policy) set to ``seed``."""
        return ExperimentConfig(
            DatasetSection(**{**self.dataset.__dict__, "data_seed": seed, "split_seed": seed}),
            DetectorsSection(seed, dict(self.detectors.overrides)),
            PolicySection(**{**self.policy.__dict__, "policy_seed": seed}),
            self.delay, self.schemes, self.output_dir)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        validate(doc)
        det = dict(doc.get("detectors", {}))
        detectors = DetectorsSection(det.pop("init_seed", 0), det)
        delay = default_delay_model()
        if "delay" in doc:
            exec_ms = {k: dict(v) for k, v in delay.exec_ms.items()}
            for kind, table in doc["delay"].get("exec_ms", {}).items():
                exec_ms[kind].update(table)
            rtt = {**delay.rtt_ms, **doc["delay"].get("rtt_ms", {})}
            try:
                delay = DelayModel(exec_ms, rtt)
            except ValueError as exc:
                raise ConfigError(f"delay: {exc}") from None
        try:
            dataset = DatasetSection(**doc["dataset"])
            if dataset.source == "synthetic":
                dataset.synthetic()
        except ValueError as exc:
            raise ConfigError(f"dataset: {exc}") from None
        return cls(dataset, detectors, PolicySection(**doc.get("policy", {})), delay,
                   tuple(doc.get("schemes", SCHEMES)), doc.get("output_dir", "runs/default"))

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "detectors": self.detectors.to_dict(),
            "policy": self.policy.to_dict(),
            "delay": self.delay.to_dict(),
            "schemes": list(self.schemes),
            "output_dir": self.output_dir,
        }


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return ExperimentConfig.from_dict(doc)
