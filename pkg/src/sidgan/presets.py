"""Layered run configuration: a named preset plus user overrides.

``toy`` is sized for a CPU in minutes; ``paper`` records the full-scale
settings and is not meant to run on a desk machine.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Mapping

import yaml

from .losses import LossWeights
from .nets import PatchGanSpec, UNetSpec
from .training import ForwardTrainConfig, OptimizerConfig, TrainConfig, TrainPlan

PRESETS: dict[str, dict[str, Any]] = {
    "toy": {
        "seed": 0,
        "data": {
            "manifest": None,
            "toy": {"n_videos": 40, "n_long": 40, "n_pairs": 40, "n_val": 8, "n_static": 20,
                    "size": 64, "frames": 7},
        },
        "models": {
            "generator": {"levels": 3, "base_width": 8},
            "discriminator": {"downsample_layers": 3, "base_width": 8, "input_patch": 24},
            "forward": {"levels": 3, "base_width": 8},
        },
        "train_ab": {"epochs_constant": 30, "epochs_decay": 10, "base_lr": 2e-4, "batch_size": 8, "crop": 32,
                     "eval_interval": 5},
        "train_bc": {"epochs_constant": 30, "epochs_decay": 10, "base_lr": 2e-4, "batch_size": 8, "crop": 32,
                     "eval_interval": 5},
        "weights_ab": [6.0, 6.0],
        "weights_bc": [10.0, 10.0],
        "forward": {"total_epochs": 30, "lr_phase1": 1e-3, "lr_phase2": 1e-4, "phase_boundary": 20,
                    "plan": [10, 10, 10], "batch_size": 8, "crop": 32},
        "synthesize": {"count": None, "split": "train"},
        "evaluate": {"split": "test", "frame_index": 4, "flow": None},
        "ablate": {"real_fractions": [0.05, 0.2, 0.6, 1.0], "with_synthetic": [False, True]},
        "preprocess": {"raw_manifest": None, "isp": {}},
    },
    "paper": {
        "seed": 0,
        "data": {"manifest": "manifest.json", "toy": None},
        "models": {
            "generator": {"levels": 5, "base_width": 32},
            "discriminator": {"downsample_layers": 4, "base_width": 64, "input_patch": 192},
            "forward": {"levels": 5, "base_width": 32},
        },
        "train_ab": {"epochs_constant": 50, "epochs_decay": 20, "base_lr": 1e-4, "batch_size": 1, "crop": 256,
                     "eval_interval": 5},
        "train_bc": {"epochs_constant": 50, "epochs_decay": 20, "base_lr": 1e-4, "batch_size": 1, "crop": 256,
                     "eval_interval": 5},
        "weights_ab": [6.0, 6.0],
        "weights_bc": [10.0, 10.0],
        "forward": {"total_epochs": 1000, "lr_phase1": 1e-4, "lr_phase2": 1e-5, "phase_boundary": 500,
                    "plan": [300, 400, 300], "batch_size": 1, "crop": 256, "real_synth_ratio": [1, 45]},
        "synthesize": {"count": None, "split": "train"},
        "evaluate": {"split": "test", "frame_index": 4, "flow": None},
        "ablate": {"real_fractions": [0.02, 0.05, 0.10, 0.20, 0.40, 0.60, 0.80, 1.00],
                   "with_synthetic": [False, True]},
        "preprocess": {"raw_manifest": None, "isp": {"digital_gain": 1.0, "bin": True}},
    },
}


def deep_merge(base: Mapping, override: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def read_config_file(path) -> dict:
    text = Path(path).read_text()
    doc = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if doc is None:
        return {}
    if not isinstance(doc, Mapping):
        raise ValueError(f"config {path} must hold a mapping")
    return dict(doc)


def resolve_config(preset: str | None = None, overrides: Mapping | None = None, seed: int | None = None) -> dict:
    """Preset (from the argument or the override's ``preset`` key) merged with overrides."""
    overrides = dict(overrides or {})
    name = preset or overrides.pop("preset", None) or "toy"
    overrides.pop("preset", None)
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    doc = deep_merge(PRESETS[name], overrides)
    doc["preset"] = name
    if seed is not None:
        doc["seed"] = int(seed)
    return doc


def generator_spec(doc: Mapping) -> UNetSpec:
    return UNetSpec(**doc["models"]["generator"])


def discriminator_spec(doc: Mapping) -> PatchGanSpec:
    return PatchGanSpec(**doc["models"]["discriminator"])


def forward_spec(doc: Mapping) -> UNetSpec:
    return UNetSpec(**doc["models"]["forward"])


def train_config(doc: Mapping, key: str) -> TrainConfig:
    return TrainConfig(**{**doc[key], "seed": doc["seed"]})


def loss_weights(doc: Mapping, key: str) -> LossWeights:
    return LossWeights(*doc[key])


def forward_config(doc: Mapping) -> ForwardTrainConfig:
    kw = dict(doc["forward"])
    plan = kw.pop("plan", None)
    if plan is not None:
        kw["plan"] = TrainPlan.three_step(*plan) if isinstance(plan, (list, tuple)) else plan
    if "optimizer" in kw:
        kw["optimizer"] = OptimizerConfig(**kw["optimizer"])
    return ForwardTrainConfig(**kw, seed=doc["seed"])
