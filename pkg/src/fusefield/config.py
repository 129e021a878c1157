"""Run configuration: one JSON file, schema-validated, with dotted overrides.

The schema is the ``DEFAULT_CONFIG`` tree itself: every user key must exist
in it (unknown keys are rejected with their dotted path) and every value
must match the default's type.  ``--set a.b.c=value`` overrides parse the
value as a JSON literal, falling back to a plain string.
"""

from __future__ import annotations

import copy
import json

from .errors import ConfigError
from .fusion import DEFAULT_COUNT_CAP
from .geometry import CameraIntrinsics, GridSpec
from .scene import SyntheticScene, load_scene, preset_scene
from .search import PolicyConfig
from .train import ModelParams, TrainConfig

DEFAULT_CONFIG = {
    "seed": 0,
    "scene": {
        # Preset name, or a scene JSON file which takes precedence.
        "preset": "sphere_floor",
        "file": "",
        "feature_dim": 16,
        "feature_seed": 0,
    },
    "grid": {
        "origin": [-0.6, -0.6, -0.05],
        "voxel_size": 0.075,
        "dims": [16, 16, 18],
    },
    "camera": {
        "fx": 24.0,
        "fy": 24.0,
        "cx": 12.0,
        "cy": 9.0,
        "width": 24,
        "height": 18,
    },
    "fusion": {
        "trunc": 0.15,
        "count_cap": DEFAULT_COUNT_CAP,
    },
    "model": {
        "encoder_channels": 4,
        "field_channels": 8,
        "hidden": 32,
    },
    "train": {
        "m_ref": 8,
        "m_tgt": 2,
        "n_ray": 256,
        "n_s": 64,
        "p": 0.5,
        "lambda_rgb": 1.0,
        "lambda_feat": 1.0,
        "lambda_tsdf": 1.0,
        "lr": 1e-3,
        "steps": 2000,
        "checkpoint_every": 0,
    },
    "render": {
        "n_samples": 64,
        "stride": 1,
    },
    "trajectory": {
        "kind": "orbit",  # "orbit" or "random"
        "n_frames": 8,
        "radius": 1.0,
        "height": 0.0,
        "start_angle": 0.0,
    },
    "query": {
        "class_id": 1,
        "temperature": 0.1,
    },
    "policy": {
        "n_init_views": 4,
        "n_explore_steps": 6,
        "min_lookat_distance": 0.3,
        "camera_standoff": 1.0,
        "top_quantile": 0.9,
    },
}


def _coerce(default, given, path: str):
    if isinstance(default, dict):
        if not isinstance(given, dict):
            raise ConfigError(f"{path} must be a table of settings")
        return _merge(default, given, path + ".")
    if isinstance(default, bool):
        if not isinstance(given, bool):
            raise ConfigError(f"{path} must be a boolean")
        return given
    if isinstance(default, int):
        if isinstance(given, bool) or not isinstance(given, int):
            raise ConfigError(f"{path} must be an integer")
        return given
    if isinstance(default, float):
        if isinstance(given, bool) or not isinstance(given, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(given)
    if isinstance(default, str):
        if not isinstance(given, str):
            raise ConfigError(f"{path} must be a string")
        return given
    if isinstance(default, list):
        if not isinstance(given, list) or len(given) != len(default):
            raise ConfigError(f"{path} must be a list of {len(default)} values")
        return [_coerce(default[0], v, f"{path}[{i}]") for i, v in enumerate(given)]
    raise ConfigError(f"unsupported schema type at {path}")


def _merge(defaults: dict, doc: dict, prefix: str = "") -> dict:
    for key in doc:
        if key not in defaults:
            raise ConfigError(f"unknown config key {prefix}{key}")
    out = {}
    for key, default in defaults.items():
        if key in doc:
            out[key] = _coerce(default, doc[key], prefix + key)
        else:
            out[key] = copy.deepcopy(default)
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one ``a.b.c=value`` override in place (value = JSON literal)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    schema = DEFAULT_CONFIG
    for key in keys[:-1]:
        if not isinstance(schema, dict) or key not in schema:
            raise ConfigError(f"unknown config key {dotted.strip()}")
        node = node[key]
        schema = schema[key]
    leaf = keys[-1]
    if not isinstance(schema, dict) or leaf not in schema:
        raise ConfigError(f"unknown config key {dotted.strip()}")
    node[leaf] = _coerce(schema[leaf], value, dotted.strip())


def load_config(path: str = None, overrides=()) -> dict:
    """Validated config: file contents (if any) over defaults, then overrides."""
    if path is None:
        cfg = copy.deepcopy(DEFAULT_CONFIG)
    else:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid config JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(DEFAULT_CONFIG, doc)
    for assignment in overrides:
        apply_override(cfg, assignment)
    return cfg


def save_config(path: str, cfg: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Typed views.


def config_scene(cfg: dict) -> SyntheticScene:
    section = cfg["scene"]
    if section["file"]:
        return load_scene(section["file"])
    return preset_scene(
        section["preset"],
        feature_dim=section["feature_dim"],
        feature_seed=section["feature_seed"],
    )


def config_grid(cfg: dict) -> GridSpec:
    section = cfg["grid"]
    return GridSpec(
        tuple(section["origin"]), section["voxel_size"], tuple(section["dims"])
    )


def config_camera(cfg: dict) -> CameraIntrinsics:
    c = cfg["camera"]
    return CameraIntrinsics(c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"])


def config_train(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t.pop("checkpoint_every")
    return TrainConfig(
        **t,
        seed=cfg["seed"],
        trunc=cfg["fusion"]["trunc"],
        count_cap=cfg["fusion"]["count_cap"],
    )


def config_policy(cfg: dict) -> PolicyConfig:
    return PolicyConfig(**cfg["policy"], seed=cfg["seed"])


def create_model(cfg: dict, scene: SyntheticScene) -> ModelParams:
    m = cfg["model"]
    return ModelParams.create(
        c_e=m["encoder_channels"],
        c_field=m["field_channels"],
        semantic_dim=scene.feature_dim,
        hidden=m["hidden"],
        seed=cfg["seed"],
    )
