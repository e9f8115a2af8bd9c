"""Run configuration: ``key = value`` files, named profiles and overrides.

A config file may name a ``profile``; its defaults are applied first, then the
file's keys, then command-line overrides.
"""
from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import AugmentConfig, SynthSpec
from .model import SHAPENET_PARTS, ModelConfig
from .numerics import CosineAnnealing, OptimizerConfig


class ConfigError(ValueError):
    pass


PROFILES: dict[str, dict] = {
    "modelnet40": dict(
        task="classification", blocks="(3,64),(64,64),(64,128),(128,256)", k=20,
        num_classes=40, lr=0.0001, momentum=0.9, weight_decay=0.0001, schedule="none",
        batch_size=8, epochs=250, num_points=1024, use_alignment=True),
    "shapenet": dict(
        task="part_segmentation", blocks="(3,96),(96,96),(96,96)", k=20, num_classes=16,
        num_parts=50, lr=0.01, momentum=0.9, weight_decay=0.0001, schedule="cosine",
        min_lr=0.001, batch_size=10, epochs=200, num_points=2048, use_alignment=True),
    "s3dis": dict(
        task="semantic_segmentation", blocks="(9,96),(96,96),(96,96),(96,96)", k=15,
        num_classes=13, num_parts=13, lr=0.01, momentum=0.9, weight_decay=0.0001,
        schedule="cosine", min_lr=0.001, batch_size=4, epochs=50, num_points=4096,
        use_alignment=True),
    "synth-cls": dict(
        task="classification", blocks="(3,64),(64,64)", k=20, num_classes=2, lr=0.01,
        momentum=0.9, weight_decay=0.0001, schedule="cosine", min_lr=0.001, batch_size=8,
        epochs=200, synth="sphere,cube", synth_points=128, synth_clouds_per_class=16,
        synth_noise=0.01, dtype="float32"),
    "synth-seg": dict(
        task="part_segmentation", blocks="(3,32),(32,32)", k=16, num_classes=1, num_parts=2,
        lr=0.01, momentum=0.9, weight_decay=0.0001, schedule="cosine", min_lr=0.001,
        batch_size=4, epochs=30, synth="two_part_rod", synth_points=64,
        synth_clouds_per_class=12, synth_noise=0.01, dtype="float32",
        shape_width=64, label_width=16, seg_hidden="(64,32)"),
}

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"optimizer"}
_OPT_KEYS = {"lr", "momentum", "weight_decay", "schedule", "min_lr"}
_RUN_KEYS = {
    "profile", "dataset_root", "synth", "synth_points", "synth_clouds_per_class", "synth_noise",
    "synth_attributes", "synth_seed", "num_points", "out", "checkpoint", "log_every",
    "deterministic", "normalize", "augment", "eval_split",
}


@dataclass
class RunConfig:
    model: ModelConfig
    profile: Optional[str] = None
    dataset_root: Optional[str] = None
    synth: Optional[SynthSpec] = None
    num_points: Optional[int] = None
    out: str = "runs/default"
    checkpoint: Optional[str] = None
    log_every: int = 1
    deterministic: bool = False
    normalize: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval_split: str = "test"

    def __post_init__(self):
        if self.dataset_root is None and self.synth is None:
            raise ConfigError("configure either dataset_root or a synth generator")


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _literal(v):
    if not isinstance(v, str):
        return v
    try:
        return ast.literal_eval(v)
    except (ValueError, SyntaxError):
        raise ConfigError(f"cannot parse {v!r}") from None


def _blocks(v):
    val = _literal(v) if isinstance(v, str) else v
    if isinstance(val, tuple) and len(val) == 2 and all(isinstance(x, int) for x in val):
        val = [val]
    try:
        return [(int(c), int(d)) for c, d in val]
    except (TypeError, ValueError):
        raise ConfigError(f"blocks must be a list of (C, D) pairs, got {v!r}") from None


def _coerce_model(key: str, value):
    kind = {f.name: f.type for f in dataclasses.fields(ModelConfig)}[key]
    if key == "blocks":
        return _blocks(value)
    if key in ("cls_hidden", "seg_hidden"):
        val = _literal(value)
        return tuple(val) if isinstance(val, (tuple, list)) else (int(val),)
    if key == "category_parts":
        return _literal(value)
    if kind == "bool":
        return _bool(value)
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return str(value)


def resolve(settings: dict, overrides: Optional[dict] = None) -> RunConfig:
    """Merge profile defaults, file settings and overrides into a RunConfig."""
    merged: dict = {}
    profile = (overrides or {}).get("profile") or settings.get("profile")
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        merged.update(PROFILES[profile])
    merged.update(settings)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    merged["profile"] = profile

    unknown = set(merged) - _MODEL_KEYS - _OPT_KEYS - _RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    deterministic = _bool(merged.get("deterministic", False))
    model_kw = {k: _coerce_model(k, v) for k, v in merged.items() if k in _MODEL_KEYS}
    if deterministic:
        model_kw["dtype"] = "float64"
    if profile == "shapenet" and "category_parts" not in model_kw:
        model_kw["category_parts"] = [list(p) for p in SHAPENET_PARTS]
    if merged.get("synth") == "two_part_rod" and "category_parts" not in model_kw:
        model_kw["category_parts"] = [[0, 1]]

    epochs = int(merged.get("epochs", ModelConfig.epochs))
    schedule = None
    if str(merged.get("schedule", "none")) == "cosine":
        schedule = CosineAnnealing(float(merged.get("min_lr", 0.0)), epochs)
    elif str(merged.get("schedule", "none")) != "none":
        raise ConfigError(f"unknown schedule {merged['schedule']!r}")
    try:
        opt = OptimizerConfig(float(merged.get("lr", 0.01)), float(merged.get("momentum", 0.9)),
                              float(merged.get("weight_decay", 1e-4)), schedule)
        model = ModelConfig(optimizer=opt, **model_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    synth = None
    if merged.get("synth"):
        gens = tuple(g.strip() for g in str(merged["synth"]).split(",") if g.strip())
        synth = SynthSpec(gens, int(merged.get("synth_points", 128)),
                          int(merged.get("synth_clouds_per_class", 16)),
                          float(merged.get("synth_noise", 0.01)),
                          int(merged.get("synth_seed", model.seed)),
                          _bool(merged.get("synth_attributes", False)))
    num_points = merged.get("num_points")
    return RunConfig(
        model=model, profile=profile, dataset_root=merged.get("dataset_root"), synth=synth,
        num_points=None if num_points is None else int(num_points),
        out=str(merged.get("out", "runs/default")), checkpoint=merged.get("checkpoint"),
        log_every=int(merged.get("log_every", 1)), deterministic=deterministic,
        normalize=_bool(merged.get("normalize", True)),
        augment=AugmentConfig(enabled=_bool(merged.get("augment", False))),
        eval_split=str(merged.get("eval_split", "test")),
    )


def load_config(path: Optional[str], overrides: Optional[dict] = None) -> RunConfig:
    settings = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        settings = parse_config_text(p.read_text(), str(p))
    return resolve(settings, overrides)
