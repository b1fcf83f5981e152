"""Flat key=value run configuration with a strict schema.

Unknown keys and missing required keys abort before any work, naming the
offending key (and line for parse errors). Profiles `toy` and `paper` ship
with the package.
"""

from __future__ import annotations

import importlib.resources

_REQUIRED = object()


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


# key -> (parser, default). _REQUIRED means the key must be present.
SCHEMA: dict[str, tuple] = {
    "world.seed": (int, _REQUIRED),
    "world.n_locations": (int, 16),
    "world.n_clusters": (int, 4),
    "world.samples_per_location": (int, 150),
    "world.image_size": (int, 32),
    "world.n_seg_classes": (int, 6),
    "world.n_scene_classes": (int, 4),
    "world.layout_blocks": (int, 4),
    "world.jitter": (float, 0.15),
    "world.shift_strength": (float, 1.0),
    "world.gps_noise_km": (float, 0.05),
    "world.cluster_radius_km": (float, 400.0),
    "world.min_cluster_sep_km": (float, 4000.0),
    "world.min_location_sep_km": (float, 120.0),
    "world.n_train": (int, 2000),
    "world.n_val": (int, 200),
    "world.n_test": (int, 200),
    "cells.min_images": (int, 50),
    "cells.max_coarse": (int, 900),
    "cells.max_middle": (int, 400),
    "cells.max_fine": (int, 170),
    "cells.max_depth": (int, 20),
    "model.patch_size": (int, 4),
    "model.embed_dim": (int, 64),
    "model.depth": (int, 4),
    "model.heads": (int, 4),
    "model.ffn_dim": (int, 128),
    "model.branches": (str, "dual"),
    "model.mff": (_bool, True),
    "model.attentive_fusion": (_bool, True),
    "model.scene_head": (_bool, True),
    "model.seg_encoding": (str, "embed"),
    "model.seg_channels": (int, 3),
    "train.lr": (float, 1e-3),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 1e-4),
    "train.epochs": (int, 30),
    "train.warmup_epochs": (int, 2),
    "train.batch_size": (int, 32),
    "train.alpha": (float, 0.3),
    "train.beta": (float, 0.3),
    "train.gamma": (float, 0.1),
    "train.flip_prob": (float, 0.5),
    "train.brightness": (float, 0.4),
    "train.contrast": (float, 0.4),
    "train.saturation": (float, 0.4),
    "train.hue": (float, 0.1),
    "train.jitter_prob": (float, 0.8),
    "eval.toy_thresholds_km": (str, "0.05,0.2,1,5,25"),
}


def parse_config(path: str) -> dict:
    values: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, _, val = (part.strip() for part in line.partition("="))
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            parser = SCHEMA[key][0]
            try:
                values[key] = parser(val)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    for key, (_, default) in SCHEMA.items():
        if key in values:
            continue
        if default is _REQUIRED:
            raise ConfigError(f"{path}: missing required key {key!r}")
        values[key] = default
    return values


def default_config(seed: int = 42) -> dict:
    values = {k: d for k, (_, d) in SCHEMA.items() if d is not _REQUIRED}
    values["world.seed"] = seed
    return values


def profile_path(name: str) -> str:
    res = importlib.resources.files("tloc") / "profiles" / f"{name}.cfg"
    if not res.is_file():
        raise ConfigError(f"unknown profile {name!r}")
    return str(res)
