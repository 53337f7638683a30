"""Run configuration: nested dataclasses, strict JSON loading and a generated JSON schema."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass
from dataclasses import field as dc_field
from pathlib import Path
from typing import Any, Literal, Optional

import jsonschema


@dataclass
class EncoderConfig:
    n_levels: int = 8
    features_per_level: int = 2
    base_resolution: int = 16
    per_level_scale: float = 1.39
    log2_table_size: int = 14
    init_scale: float = 1e-4


@dataclass
class FieldConfig:
    n_freqs_audio: int = 4
    n_freqs_blink: int = 2
    n_freqs_dir: int = 4
    cond_width: int = 16
    cond_hidden: int = 32
    feat_hidden: int = 64
    d_attn: int = 32
    d_v: int = 32
    density_hidden: int = 64
    density_layers: int = 2
    geo_feat_dim: int = 15
    color_hidden: int = 64
    color_layers: int = 2
    # None means 1/sqrt(d_attn); 1.0 reproduces the unscaled dot product.
    attention_scale: Optional[float] = None
    face_audio: bool = True
    density_activation: Literal["softplus", "exp"] = "softplus"
    density_bias: float = 0.0
    mouth_encoder_levels: int = 6
    mouth_log2_table_size: int = 12


@dataclass
class RenderConfig:
    n_samples_train: int = 32
    n_samples_eval: int = 64
    stratified: bool = True
    background: list = dc_field(default_factory=lambda: [0.0, 0.0, 0.0])
    fusion: Literal["weighted", "raw_sum"] = "weighted"
    compositing: Literal["fused", "per_branch"] = "fused"
    chunk_rays: int = 1024


@dataclass
class LossConfig:
    lambda_mouth: float = 0.001
    lambda_perc: float = 0.001
    patch_size: int = 16
    perceptual_surrogate: Literal["pyramid_mse", "none"] = "pyramid_mse"
    coarse_face_set: Literal["all", "mask"] = "all"


@dataclass
class ScheduleConfig:
    coarse_steps: int = 1500
    fine_steps: int = 500
    rays_per_step: int = 256
    seed: int = 0
    lr_tables: float = 1e-2
    lr_heads: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    lr_decay: float = 0.1
    fine_updates: Literal["mouth_only", "all"] = "mouth_only"
    eval_every: int = 0
    eval_frames: int = 4


@dataclass
class AblationConfig:
    transformer: bool = True
    fusion: bool = True
    finetune: bool = True


@dataclass
class DataConfig:
    n_frames: int = 200
    resolution: int = 64
    seed: int = 0
    steps_per_ray: int = 512
    orbit_deg: float = 10.0
    holdout_every: int = 10


@dataclass
class RunConfig:
    encoder: EncoderConfig = dc_field(default_factory=EncoderConfig)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    render: RenderConfig = dc_field(default_factory=RenderConfig)
    loss: LossConfig = dc_field(default_factory=LossConfig)
    schedule: ScheduleConfig = dc_field(default_factory=ScheduleConfig)
    ablation: AblationConfig = dc_field(default_factory=AblationConfig)
    data: DataConfig = dc_field(default_factory=DataConfig)
    dtype: Literal["float32", "float64"] = "float32"
    threads: int = 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of everything that affects results; the thread count does not."""
        d = self.to_dict()
        d.pop("threads")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **sections: dict) -> "RunConfig":
        """Copy with section-level overrides, e.g. ``cfg.replace(ablation={"fusion": False})``."""
        d = self.to_dict()
        for name, updates in sections.items():
            if isinstance(updates, dict):
                d[name].update(updates)
            else:
                d[name] = updates
        return from_dict(d)


ABLATION_ROWS = {
    "full": dict(transformer=True, fusion=True, finetune=True),
    "w/o T w F": dict(transformer=False, fusion=True, finetune=True),
    "w/o S w F": dict(transformer=True, fusion=False, finetune=True),
    "w/o T w/o F": dict(transformer=False, fusion=True, finetune=False),
    "w/o S w/o F": dict(transformer=True, fusion=False, finetune=False),
}


def ablation_row_name(ab: AblationConfig) -> str:
    for name, flags in ABLATION_ROWS.items():
        if flags == dataclasses.asdict(ab):
            return name
    parts = ["T" if ab.transformer else "w/o T", "S" if ab.fusion else "w/o S",
             "F" if ab.finetune else "w/o F"]
    return " ".join(parts)


def _type_schema(tp: Any) -> dict:
    origin = typing.get_origin(tp)
    if origin is Literal:
        return {"enum": list(typing.get_args(tp))}
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return {"anyOf": [_type_schema(args[0]), {"type": "null"}]}
    if tp is bool:
        return {"type": "boolean"}
    if tp is int:
        return {"type": "integer"}
    if tp is float:
        return {"type": "number"}
    if tp is str:
        return {"type": "string"}
    if tp is list:
        return {"type": "array", "items": {"type": "number"}}
    if dataclasses.is_dataclass(tp):
        return _dataclass_schema(tp)
    raise TypeError(f"no schema for {tp!r}")


def _dataclass_schema(cls: type) -> dict:
    hints = typing.get_type_hints(cls)
    props = {f.name: _type_schema(hints[f.name]) for f in dataclasses.fields(cls)}
    return {"type": "object", "properties": props, "additionalProperties": False}


def schema() -> dict:
    """JSON schema for a (partial) run config; every key is optional, unknown keys rejected."""
    s = _dataclass_schema(RunConfig)
    s["$schema"] = "http://json-schema.org/draft-07/schema#"
    s["title"] = "dtnerf run config"
    return s


def _build(cls: type, data: dict) -> Any:
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        tp = hints[f.name]
        val = data[f.name]
        if dataclasses.is_dataclass(tp):
            val = _build(tp, val)
        elif tp is float and isinstance(val, int):
            val = float(val)
        kwargs[f.name] = val
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    """Validate against the schema and build a RunConfig; missing keys take defaults."""
    jsonschema.validate(data, schema())
    return _build(RunConfig, data)


def load_config(path: Optional[str | Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return from_dict(json.load(fh))


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
