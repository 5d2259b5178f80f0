"""Experiment configuration: JSON sections with defaults and full-key validation.

Sections::

    data    generator settings (SyntheticSpec fields)
    model   backbone, topology, taps and head sizes
    train   optimisation settings (TrainConfig fields)
    post    post-processing chain and how it is applied (on / off / auto-gate)
    fusion  ensemble fine-tuning settings
    report  histogram resolution

Every key is checked; a bad entry raises :class:`ConfigError` carrying its
dotted path (``model.topology``).
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict
from pathlib import Path

from .data import DatasetError, SyntheticSpec
from .pipeline import PostProcessing
from .trainer import POST_MODES, ConfigError, TrainConfig
from .zoo import TOPOLOGIES, BackboneSpec, HeadSpec, ModelError, toy_backbone, vgg_face_backbone

TOPOLOGY_ALIASES = {"cnn": "frame-dense", "rnn": "single-rnn", "1rnn": "concat-1rnn", "krnn": "parallel-krnn",
                    "krnn-fc": "parallel-krnn-fc"}

MODEL_DEFAULTS = {
    "backbone": "toy",          # toy | vgg-face
    "widths": [4, 4, 8, 8, 16, 16],
    "backbone_fc_units": 128,
    "topology": "parallel-krnn",
    "taps": ["pool1", "pool3", "fc"],
    "rnn_layers": 2,
    "rnn_units": 32,
    "fc_units": 64,
    "tap_reduce": "gap",
    "use_landmarks": True,
    "seed": 0,
}
POST_DEFAULTS = {"mode": "auto-gate", **PostProcessing(window_v=5, window_a=5, smooth_min_frames=4,
                                                       smooth_alpha=0.5).to_dict()}
FUSION_DEFAULTS = {"heads": ["rnn", "fc"], "units": 32, "epochs": 3, "freeze_members": False}
REPORT_DEFAULTS = {"bins": 10, "split": "all"}


def default_config() -> dict:
    return {"data": _spec_dict(SyntheticSpec()), "model": dict(MODEL_DEFAULTS), "train": TrainConfig().to_dict(),
            "post": dict(POST_DEFAULTS), "fusion": copy.deepcopy(FUSION_DEFAULTS), "report": dict(REPORT_DEFAULTS)}


def _spec_dict(spec: SyntheticSpec) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}


def resolve_topology(name: str) -> str:
    topo = TOPOLOGY_ALIASES.get(name, name)
    if topo not in TOPOLOGIES:
        raise ConfigError("model.topology", f"unknown topology {name!r}; use one of "
                                            f"{sorted(TOPOLOGY_ALIASES) + list(TOPOLOGIES)}")
    return topo


def merge(base: dict, override: dict, path: str = "") -> dict:
    """Overlay ``override`` onto ``base``; keys absent from ``base`` are rejected."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}{key}"
        if key not in out:
            raise ConfigError(dotted, "unknown key")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(dotted, "expected an object")
            out[key] = merge(out[key], value, dotted + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None, seed: int | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("--config", f"no such file: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError("--config", "top level must be an object")
        cfg = merge(cfg, user)
    if seed is not None:
        cfg["data"]["seed"] = cfg["model"]["seed"] = cfg["train"]["seed"] = int(seed)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    data_spec(cfg)
    train_config(cfg)
    post_processing(cfg)
    m = cfg["model"]
    if m["backbone"] not in ("toy", "vgg-face"):
        raise ConfigError("model.backbone", f"must be 'toy' or 'vgg-face', got {m['backbone']!r}")
    m["topology"] = resolve_topology(m["topology"])
    if not isinstance(m["taps"], list) or not m["taps"]:
        raise ConfigError("model.taps", "must be a non-empty list of tap names")
    for key in ("rnn_layers", "rnn_units", "fc_units", "backbone_fc_units"):
        if not isinstance(m[key], int) or m[key] < 1:
            raise ConfigError(f"model.{key}", f"must be a positive integer, got {m[key]!r}")
    try:
        HeadSpec(m["topology"], m["rnn_layers"], m["rnn_units"], m["fc_units"], 2, m["tap_reduce"])
    except ModelError as exc:
        raise ConfigError("model.tap_reduce" if "tap_reduce" in str(exc) else "model", str(exc)) from None
    f = cfg["fusion"]
    for head in f["heads"]:
        if head not in ("rnn", "fc", "none"):
            raise ConfigError("fusion.heads", f"unknown fusion head {head!r}")
    for key in ("units", "epochs"):
        if not isinstance(f[key], int) or f[key] < 1:
            raise ConfigError(f"fusion.{key}", f"must be a positive integer, got {f[key]!r}")
    if not isinstance(cfg["report"]["bins"], int) or cfg["report"]["bins"] < 1:
        raise ConfigError("report.bins", "must be a positive integer")


def data_spec(cfg: dict) -> SyntheticSpec:
    try:
        spec = SyntheticSpec.from_dict(cfg["data"])
        spec.validate()
    except (DatasetError, TypeError) as exc:
        msg = str(exc)
        key = next((k for k in cfg["data"] if k in msg), "")
        raise ConfigError(f"data.{key}" if key else "data", msg) from None
    return spec


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def post_processing(cfg: dict) -> tuple[str, PostProcessing]:
    p = dict(cfg["post"])
    mode = p.pop("mode")
    if mode not in POST_MODES:
        raise ConfigError("post.mode", f"must be one of {POST_MODES}, got {mode!r}")
    if p["reduction"] not in ("mean", "median"):
        raise ConfigError("post.reduction", f"must be 'mean' or 'median', got {p['reduction']!r}")
    for key in ("window_v", "window_a"):
        if not isinstance(p[key], int) or p[key] < 1 or p[key] % 2 == 0:
            raise ConfigError(f"post.{key}", f"must be an odd positive integer, got {p[key]!r}")
    if not 0.0 < p["smooth_alpha"] <= 1.0:
        raise ConfigError("post.smooth_alpha", f"must lie in (0, 1], got {p['smooth_alpha']}")
    if not isinstance(p["smooth_min_frames"], int) or p["smooth_min_frames"] < 0:
        raise ConfigError("post.smooth_min_frames", "must be a non-negative integer")
    return mode, PostProcessing(**p)


def backbone_spec(cfg: dict, extent: int, channels: int) -> BackboneSpec:
    m = cfg["model"]
    try:
        if m["backbone"] == "vgg-face":
            return vgg_face_backbone(extent, channels, m["backbone_fc_units"])
        return toy_backbone(extent, channels, tuple(m["widths"]), m["backbone_fc_units"])
    except ModelError as exc:
        raise ConfigError("model.backbone", str(exc)) from None


def head_spec(cfg: dict) -> HeadSpec:
    m = cfg["model"]
    return HeadSpec(m["topology"], m["rnn_layers"], m["rnn_units"], m["fc_units"], 2, m["tap_reduce"])


__all__ = ["ConfigError", "default_config", "load_config", "merge", "validate", "data_spec", "train_config",
           "post_processing", "backbone_spec", "head_spec", "resolve_topology", "TOPOLOGY_ALIASES"]
