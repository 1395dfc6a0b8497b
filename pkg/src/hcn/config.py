"""Run configuration: a strict JSON schema for the command-line tools.

Every section rejects unknown keys so typos fail at load time instead of
silently falling back to defaults.  The seed is mandatory; nothing in a run
may depend on the wall clock.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .detection import DetectionConfig
from .errors import ConfigError
from .model import ModelConfig

TASKS = ("recognize", "detect")


def _check_keys(raw: dict, known: set, where: str) -> None:
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


@dataclass
class TrainingConfig:
    seed: int
    batch_size: int = 32
    total_steps: int = 800
    eval_every: int = 200
    lr: float = 1e-3
    lr_decay: float = 0.99
    lr_decay_every: int = 1000
    weight_decay: float = 1e-3

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainingConfig":
        known = {
            "seed", "batch_size", "total_steps", "eval_every", "lr",
            "lr_decay", "lr_decay_every", "weight_decay",
        }
        _check_keys(raw, known, "training")
        if "seed" not in raw:
            raise ConfigError("training: 'seed' is mandatory")
        cfg = cls(**raw)
        if cfg.batch_size < 1 or cfg.total_steps < 1:
            raise ConfigError("training: batch_size and total_steps must be >= 1")
        if cfg.eval_every < 0:
            raise ConfigError("training: eval_every must be >= 0")
        if cfg.lr <= 0 or not 0 < cfg.lr_decay <= 1 or cfg.lr_decay_every < 1:
            raise ConfigError("training: invalid learning-rate schedule")
        return cfg

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "batch_size": self.batch_size,
            "total_steps": self.total_steps,
            "eval_every": self.eval_every,
            "lr": self.lr,
            "lr_decay": self.lr_decay,
            "lr_decay_every": self.lr_decay_every,
            "weight_decay": self.weight_decay,
        }


_SYNTH_KEYS = {
    "classes", "samples_per_class", "frames", "joints", "persons", "noise_sigma", "seed",
}
_SYNTH_DETECTION_KEYS = {
    "classes", "num_sequences", "length", "joints", "seed", "noise_sigma",
    "min_action", "max_action", "min_gap", "amplitude",
}


@dataclass
class DataConfig:
    path: str | None = None
    synth: dict | None = None
    synth_detection: dict | None = None
    val_fraction: float = 0.0
    split_seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> "DataConfig":
        known = {"path", "synth", "synth_detection", "val_fraction", "split_seed"}
        _check_keys(raw, known, "data")
        cfg = cls(**raw)
        sources = [s for s in (cfg.path, cfg.synth, cfg.synth_detection) if s is not None]
        if len(sources) != 1:
            raise ConfigError("data: exactly one of 'path', 'synth', 'synth_detection' is required")
        if cfg.synth is not None:
            _check_keys(cfg.synth, _SYNTH_KEYS, "data.synth")
        if cfg.synth_detection is not None:
            _check_keys(cfg.synth_detection, _SYNTH_DETECTION_KEYS, "data.synth_detection")
        if not 0.0 <= cfg.val_fraction < 1.0:
            raise ConfigError(f"data: val_fraction must be in [0, 1), got {cfg.val_fraction}")
        return cfg

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "synth": self.synth,
            "synth_detection": self.synth_detection,
            "val_fraction": self.val_fraction,
            "split_seed": self.split_seed,
        }


@dataclass
class AblateConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    variants: list = field(default_factory=lambda: ["global", "local"])
    fusion_modes: list = field(
        default_factory=lambda: ["early", "late_mean", "late_concat", "late_max"]
    )

    @classmethod
    def from_dict(cls, raw: dict) -> "AblateConfig":
        _check_keys(raw, {"seeds", "variants", "fusion_modes"}, "ablate")
        cfg = cls(**raw)
        if not cfg.seeds:
            raise ConfigError("ablate: need at least one seed")
        return cfg

    def to_dict(self) -> dict:
        return {"seeds": list(self.seeds), "variants": list(self.variants),
                "fusion_modes": list(self.fusion_modes)}


def _detection_from_dict(raw: dict) -> DetectionConfig:
    known = {
        "scales", "pos_iou", "neg_iou", "anchor_batch", "anchor_pos_fraction",
        "pre_nms_top", "proposal_nms_iou", "post_nms_top", "roi_pos_iou",
        "crop_len", "final_nms_iou", "score_threshold", "hidden_channels", "reg_lambda",
    }
    _check_keys(raw, known, "detection")
    kwargs = dict(raw)
    if "scales" in kwargs:
        kwargs["scales"] = tuple(kwargs["scales"])
    cfg = DetectionConfig(**kwargs)
    cfg.validate()
    return cfg


def _detection_to_dict(cfg: DetectionConfig) -> dict:
    return {
        "scales": list(cfg.scales),
        "pos_iou": cfg.pos_iou,
        "neg_iou": cfg.neg_iou,
        "anchor_batch": cfg.anchor_batch,
        "anchor_pos_fraction": cfg.anchor_pos_fraction,
        "pre_nms_top": cfg.pre_nms_top,
        "proposal_nms_iou": cfg.proposal_nms_iou,
        "post_nms_top": cfg.post_nms_top,
        "roi_pos_iou": cfg.roi_pos_iou,
        "crop_len": cfg.crop_len,
        "final_nms_iou": cfg.final_nms_iou,
        "score_threshold": cfg.score_threshold,
        "hidden_channels": cfg.hidden_channels,
        "reg_lambda": cfg.reg_lambda,
    }


@dataclass
class RunConfig:
    task: str
    model: ModelConfig
    training: TrainingConfig
    data: DataConfig
    output_dir: str = "runs/out"
    detection: DetectionConfig | None = None
    ablate: AblateConfig = field(default_factory=AblateConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {"task", "model", "training", "data", "output_dir", "detection", "ablate"}
        _check_keys(raw, known, "run config")
        for key in ("task", "model", "training", "data"):
            if key not in raw:
                raise ConfigError(f"run config missing section {key!r}")
        task = raw["task"]
        if task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
        cfg = cls(
            task=task,
            model=ModelConfig.from_dict(raw["model"]),
            training=TrainingConfig.from_dict(raw["training"]),
            data=DataConfig.from_dict(raw["data"]),
            output_dir=raw.get("output_dir", "runs/out"),
            detection=_detection_from_dict(raw["detection"]) if raw.get("detection") else None,
            ablate=AblateConfig.from_dict(raw.get("ablate", {})),
        )
        if task == "detect":
            if cfg.data.synth is not None:
                raise ConfigError("detect task needs 'synth_detection' or 'path' data")
            if cfg.detection is None:
                cfg.detection = DetectionConfig()
        elif cfg.data.synth_detection is not None:
            raise ConfigError("recognize task cannot use 'synth_detection' data")
        return cfg

    def to_dict(self) -> dict:
        out = {
            "task": self.task,
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "data": self.data.to_dict(),
            "output_dir": self.output_dir,
            "ablate": self.ablate.to_dict(),
        }
        if self.detection is not None:
            out["detection"] = _detection_to_dict(self.detection)
        return out


def load_run_config(path) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    cfg = RunConfig.from_dict(raw)
    if cfg.data.path is not None and not os.path.exists(cfg.data.path):
        raise ConfigError(f"data file not found: {cfg.data.path}")
    return cfg
