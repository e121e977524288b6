"""Run configuration: the merged JSON document the CLI consumes (model +
schedule + loop + paths + seed), schema-validated before any compute."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .config import ArchOptions, ConfigError, HeadConfig, ModelConfig
from .training import LoopConfig, ScheduleConfig

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "required": ["model"],
    "additionalProperties": False,
    "properties": {
        "model": {"type": "object"},
        "arch": {"type": "object"},
        "head": {"type": "object"},
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_lr": {"type": "number", "exclusiveMinimum": 0},
                "warmup_frac": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "start_div": {"type": "number", "exclusiveMinimum": 1},
                "final_div": {"type": "number", "exclusiveMinimum": 1},
            },
        },
        "loop": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "weight_decay": {"type": "number", "minimum": 0},
                "log_every": {"type": "integer", "minimum": 0},
                "eval_every": {"type": "integer", "minimum": 0},
                "recon_every": {"type": "integer", "minimum": 0},
                "masked_only": {"type": "boolean"},
                "freeze_encoder": {"type": "boolean"},
                "class_weights": {"type": ["array", "null"], "items": {"type": "number"}},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "manifest": {"type": "string"},
                "split": {"type": "string", "enum": ["train", "val", "test"]},
                "eval_split": {"type": "string", "enum": ["train", "val", "test"]},
                "rgb_bands": {"type": "array", "items": {"type": "string"},
                              "minItems": 3, "maxItems": 3},
            },
        },
        "seed": {"type": "integer"},
        "out": {"type": "string"},
    },
}


@dataclass
class RunConfig:
    """Validated, resolved contents of a run configuration document."""

    model: ModelConfig
    arch: ArchOptions = field(default_factory=ArchOptions)
    head: HeadConfig = field(default_factory=HeadConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    manifest: str | None = None
    split: str = "train"
    eval_split: str | None = None
    rgb_bands: tuple[str, str, str] = ("B4", "B3", "B2")
    seed: int = 0
    out: str | None = None

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "arch": self.arch.to_dict(),
            "head": self.head.to_dict(),
            "schedule": {
                "max_lr": self.schedule.max_lr,
                "warmup_frac": self.schedule.warmup_frac,
                "start_div": self.schedule.start_div,
                "final_div": self.schedule.final_div,
            },
            "loop": self.loop.to_dict(),
            "data": {
                **({"manifest": self.manifest} if self.manifest else {}),
                "split": self.split,
                **({"eval_split": self.eval_split} if self.eval_split else {}),
                "rgb_bands": list(self.rgb_bands),
            },
            "seed": self.seed,
            **({"out": self.out} if self.out else {}),
        }


def parse_run_config(doc: dict, base_dir: Path | None = None) -> RunConfig:
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"run config schema violation: {exc.message}") from exc
    sched_doc = doc.get("schedule", {})
    data_doc = doc.get("data", {})
    manifest = data_doc.get("manifest")
    if manifest is not None and base_dir is not None and not Path(manifest).is_absolute():
        manifest = str(base_dir / manifest)
    return RunConfig(
        model=ModelConfig.from_dict(doc["model"]),
        arch=ArchOptions.from_dict(doc.get("arch", {})),
        head=HeadConfig.from_dict(doc.get("head", {})),
        schedule=ScheduleConfig(
            max_lr=sched_doc.get("max_lr", 1e-5),
            warmup_frac=sched_doc.get("warmup_frac", 0.1),
            start_div=sched_doc.get("start_div", 25.0),
            final_div=sched_doc.get("final_div", 1e4),
        ),
        loop=LoopConfig.from_dict(doc.get("loop", {})),
        manifest=manifest,
        split=data_doc.get("split", "train"),
        eval_split=data_doc.get("eval_split"),
        rgb_bands=tuple(data_doc.get("rgb_bands", ("B4", "B3", "B2"))),
        seed=doc.get("seed", 0),
        out=doc.get("out"),
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: run config is not valid JSON: {exc}") from exc
    return parse_run_config(doc, base_dir=path.parent)
