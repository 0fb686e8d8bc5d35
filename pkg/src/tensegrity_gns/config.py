"""Run configuration: nested defaults, JSON files, dotted overrides.

One JSON document drives every command. Missing keys fall back to the
defaults below; ``--set a.b.c=value`` flags override individual keys
(values are parsed as JSON when possible, else taken as strings).
"""

from __future__ import annotations

import copy
import json
import os

from .eval import EvalConfig
from .gnn import ModelConfig
from .graphgen import GraphConfig
from .mppi import MppiConfig
from .refsim import SimParams
from .train import TrainConfig

ENV_CONFIG_PATH = "TENSEGRITY_GNS_CONFIG"


def default_config() -> dict:
    return {
        "seed": 0,
        "paths": {
            "data_dir": "data",
            "checkpoint_dir": "checkpoints",
            "report_dir": "reports",
        },
        "robot": {
            "type": "three_bar",
            "rod_length": 1.0,
            "rod_mass": 0.3,
            "endcap_radius": 0.02,
            "cable_stiffness": 500.0,
            "cable_damping": 5.0,
            "motor_speed": 0.08,
        },
        "sim": {
            "gravity": -9.81,
            "ground_stiffness": 1.0e4,
            "ground_damping": 50.0,
            "friction_mu": 0.5,
            "dt_internal": 1.0e-3,
            "sample_dt": 1.0e-2,
        },
        "gen_data": {
            "friction_grid": [0.3, 0.5, 0.7],
            "stiffness_grid": [5.0e3, 1.0e4, 2.0e4],
            "trajectories_per_dataset": 9,
            "duration_s": 5.0,
            "real_like": False,
            "real_like_noise_sigma": 0.005,
        },
        "graph": {
            "h": 6,
            "n": 6,
            "contact_threshold": 0.05,
            "num_datasets": 1,
        },
        "model": {
            "latent_width": 128,
            "L": 5,
            "n": 6,
            "use_config_features": True,
            "use_recurrence": True,
            "motor_mode": "learned",
            "num_hidden_layers": 2,
        },
        "train": {
            "w1": 1.0,
            "w2": 1.0,
            "batch_size": 32,
            "epochs": 50,
            "input_noise_sigma": 0.01,
            "learning_rate": 1e-4,
            "decay_rate": 0.995,
            "warm_encodes": 6,
            "val_fraction": 0.1,
        },
        "mppi": {
            "K": 64,
            "T": 15,
            "beta": 0.5,
            "noise_sigma": 0.4,
            "alpha1": 1.0,
            "alpha2": 0.05,
            "success_radius": 0.25,
        },
        "eval": {
            "N_SH": 10,
            "T_SH": 100,
            "warm_encodes": 6,
        },
        "iterate": {
            "iterations": 2,
            "epochs_per_iteration": 10,
        },
    }


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_by_path(cfg: dict, dotted: str, raw_value: str) -> None:
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    node[keys[-1]] = value


def load_config(path: str | None = None, overrides: list[str] | None = None,
                seed: int | None = None) -> dict:
    cfg = default_config()
    if path is None:
        path = os.environ.get(ENV_CONFIG_PATH)
    if path:
        with open(path) as fh:
            cfg = _deep_merge(cfg, json.load(fh))
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override must look like key.path=value: {item}")
        dotted, raw = item.split("=", 1)
        set_by_path(cfg, dotted, raw)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def echo_config(cfg: dict, report_dir: str, command: str) -> str:
    os.makedirs(report_dir, exist_ok=True)
    path = os.path.join(report_dir, f"resolved_config_{command}.json")
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
    return path


# typed section accessors -----------------------------------------------------

def sim_params(cfg: dict) -> SimParams:
    return SimParams(**cfg["sim"])


def graph_config(cfg: dict) -> GraphConfig:
    return GraphConfig(**cfg["graph"])


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    section = dict(cfg["train"])
    section["seed"] = cfg["seed"]
    return TrainConfig(**section)


def mppi_config(cfg: dict) -> MppiConfig:
    section = dict(cfg["mppi"])
    section["seed"] = cfg["seed"]
    return MppiConfig(**section)


def eval_config(cfg: dict) -> EvalConfig:
    section = dict(cfg["eval"])
    section["seed"] = cfg["seed"]
    return EvalConfig(**section)


def build_robot(cfg: dict):
    from . import topology as topo
    robot = cfg["robot"]
    builder = {"three_bar": topo.build_three_bar,
               "six_bar": topo.build_six_bar}[robot["type"]]
    return builder(robot["rod_length"], robot["rod_mass"],
                   endcap_radius=robot["endcap_radius"],
                   stiffness=robot["cable_stiffness"],
                   damping=robot["cable_damping"],
                   motor_speed=robot["motor_speed"])
