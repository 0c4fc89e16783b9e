"""Run configuration: JSON with full defaulting and strict unknown-key rejection."""

from __future__ import annotations

import json
from pathlib import Path

from .datasets import GaussianScheduleConfig
from .errors import ConfigError
from .models import ArchitectureConfig
from .ot import SinkhornConfig, default_barycenter_config
from .training import LossWeights, TrainConfig

DEFAULT_CONFIG = {
    "seed": 0,
    "data_dir": None,
    "out_dir": None,
    "dataset": {
        "kind": "gaussian",
        "grid_height": 32,
        "grid_width": 32,
        "n_series": 10,
        "n_frames": 31,
        "x_start_range": [7.0, 9.0],
        "x_end_range": [19.0, 21.0],
        "sigma_start_range": [1.8, 2.2],
        "sigma_end_range": [2.6, 3.0],
        "y_center_range": [14.5, 16.5],
        "sharpness": 8.0,
        "amplitude": 1.0,
        "stride": 5,
    },
    "architecture": {
        "image_height": 32,
        "image_width": 32,
        "latent_dim": 16,
        "encoder_widths": [256, 64],
        "decoder_widths": [64, 256],
        "field_widths": [64, 64],
        "decoder_output": "softplus",
    },
    "training": {
        "epochs": 500,
        "regularizer": "ot",
        "gamma1": 1.0,
        "gamma2": 1.0,
        "lambda": 0.1,
        "intermediate_samples_per_interval": 3,
        "ode_substep": 0.1,
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps_hat": 1e-8,
        "sinkhorn": {
            "epsilon": None,  # null -> grid-size heuristic
            "max_iters": 200,
            "convergence_tol": 1e-4,
            "debias": False,
            "anneal_from": None,
            "anneal_factor": 0.5,
        },
    },
    "evaluation": {
        "substep": 0.1,
        "w2_epsilon": None,  # null -> grid-size heuristic for interpolation baselines
    },
}


def _merge(defaults, override, path=""):
    if not isinstance(override, dict):
        raise ConfigError(f"expected an object at '{path or '<root>'}', got {type(override).__name__}")
    out = {}
    for key, default_value in defaults.items():
        if key in override and isinstance(default_value, dict) and default_value:
            out[key] = _merge(default_value, override[key], f"{path}{key}.")
        elif key in override:
            out[key] = override[key]
        else:
            out[key] = default_value
    for key in override:
        if key not in defaults:
            raise ConfigError(f"unknown key '{path}{key}'")
    return out


def resolve_config(user: dict | None) -> dict:
    return _merge(DEFAULT_CONFIG, user or {})


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        user = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return resolve_config(user)


def write_config(config: dict, path) -> None:
    Path(path).write_text(json.dumps(config, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# typed views


def dataset_config(config: dict) -> GaussianScheduleConfig:
    block = config["dataset"]
    if block["kind"] != "gaussian":
        raise ConfigError(f"unknown dataset kind {block['kind']!r}")
    return GaussianScheduleConfig(
        grid_height=block["grid_height"],
        grid_width=block["grid_width"],
        n_series=block["n_series"],
        n_frames=block["n_frames"],
        x_start_range=tuple(block["x_start_range"]),
        x_end_range=tuple(block["x_end_range"]),
        sigma_start_range=tuple(block["sigma_start_range"]),
        sigma_end_range=tuple(block["sigma_end_range"]),
        y_center_range=tuple(block["y_center_range"]),
        sharpness=block["sharpness"],
        amplitude=block["amplitude"],
        seed=config["seed"],
    )


def arch_config(config: dict) -> ArchitectureConfig:
    block = config["architecture"]
    return ArchitectureConfig(
        image_height=block["image_height"],
        image_width=block["image_width"],
        latent_dim=block["latent_dim"],
        encoder_widths=tuple(block["encoder_widths"]),
        decoder_widths=tuple(block["decoder_widths"]),
        field_widths=tuple(block["field_widths"]),
        decoder_output=block["decoder_output"],
    )


def sinkhorn_config(config: dict) -> SinkhornConfig:
    block = config["training"]["sinkhorn"]
    arch = config["architecture"]
    eps = block["epsilon"]
    if eps is None:
        eps = default_barycenter_config(arch["image_height"], arch["image_width"]).epsilon
    return SinkhornConfig(
        epsilon=eps,
        max_iters=block["max_iters"],
        convergence_tol=block["convergence_tol"],
        debias=block["debias"],
        anneal_from=block["anneal_from"],
        anneal_factor=block["anneal_factor"],
    )


def train_config(config: dict) -> TrainConfig:
    block = config["training"]
    try:
        return TrainConfig(
            epochs=block["epochs"],
            seed=config["seed"],
            weights=LossWeights(gamma1=block["gamma1"], gamma2=block["gamma2"],
                                lam=block["lambda"]),
            reg=block["regularizer"],
            ot_cfg=sinkhorn_config(config),
            intermediate_samples_per_interval=block["intermediate_samples_per_interval"],
            ode_substep=block["ode_substep"],
            lr=block["lr"],
            beta1=block["beta1"],
            beta2=block["beta2"],
            eps_hat=block["eps_hat"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
