"""Structured YAML run configuration.

Top-level sections (all optional, defaults apply): ``model`` (with nested
``backbone`` and ``neck``), ``train``, ``assign``, ``eval``,
``postprocess``, and ``data`` (``root``, ``target_doppler``).  Unknown
keys are rejected rather than ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .assignment import AssignConfig
from .backbone import BackboneConfig
from .detmodel import ModelConfig, NeckConfig
from .errors import ConfigError
from .evalmetrics import EvalConfig
from .losses import LossWeights
from .postprocess import PostprocessConfig
from .trainer import TrainConfig


@dataclass
class DataConfig:
    root: str | None = None
    target_doppler: int | None = None  # falls back to train.target_doppler


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    data: DataConfig = field(default_factory=DataConfig)


def _build(cls, mapping: dict, section: str):
    if not isinstance(mapping, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    try:
        return cls(**mapping)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad values in '{section}': {exc}") from exc


def _tupled(mapping: dict, *keys) -> dict:
    out = dict(mapping)
    for key in keys:
        if key in out and isinstance(out[key], list):
            out[key] = tuple(out[key])
    return out


def parse_config(raw: dict) -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    known = {"model", "train", "assign", "eval", "postprocess", "data"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level sections: {sorted(unknown)}")

    model_raw = dict(raw.get("model", {}))
    backbone = _build(BackboneConfig,
                      _tupled(model_raw.pop("backbone", {}), "decomposed_stages"),
                      "model.backbone")
    neck = _build(NeckConfig, model_raw.pop("neck", {}), "model.neck")
    model = _build(ModelConfig, model_raw | {"backbone": backbone, "neck": neck}, "model")

    train_raw = dict(raw.get("train", {}))
    if "loss_weights" in train_raw:
        try:
            train_raw["loss_weights"] = LossWeights(tuple(train_raw["loss_weights"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad values in 'train.loss_weights': {exc}") from exc
    assign = _build(AssignConfig, raw.get("assign", {}), "assign")
    train_raw["assign"] = assign
    train = _build(TrainConfig, train_raw, "train")

    eval_cfg = _build(EvalConfig,
                      _tupled(raw.get("eval", {}), "iou_thresholds_3d", "iou_thresholds_2d"),
                      "eval")
    post = _build(PostprocessConfig, raw.get("postprocess", {}), "postprocess")
    data = _build(DataConfig, raw.get("data", {}), "data")
    if data.target_doppler is None:
        data.target_doppler = train.target_doppler
    else:
        train.target_doppler = data.target_doppler
    return RunConfig(model=model, train=train, eval=eval_cfg,
                     postprocess=post, data=data)


def load_config(path: Path | str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    return parse_config(raw)
