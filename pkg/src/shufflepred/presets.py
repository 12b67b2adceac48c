"""Named configurations as flat key/value maps, and builders for the config objects.

``benchmark`` is the default: 64x64 clips of 20 frames with two sprites, 10
context / 10 predicted frames, lr 1e-5. ``micro`` is a desk-scale preset
sized to train in minutes on one CPU core.
"""
from __future__ import annotations

from .losses import LossWeights
from .model import NetConfig
from .synthdata import SynthConfig
from .trainer import TrainConfig

WEIGHT_KEYS = ("lambda1", "lambda2", "lambda3", "lambda4", "alpha", "beta", "delta")

PRESETS = {
    "benchmark": {
        "size": 64, "frames": 20, "sprites": 2, "speed_min": 1, "speed_max": 3, "sprite_size": None,
        "channels": 32, "latent_dim": 128, "lstm_hidden": 64,
        "context": 10, "horizon": 10, "lr": 1e-5, "batch_size": 16, "epochs": 50, "stage_epochs": None,
        "early_stop": True,
        "lambda1": 1.0, "lambda2": 0.01, "lambda3": 1.0, "lambda4": 0.01, "alpha": 1.0, "beta": 1e-5, "delta": 1.0,
    },
    "micro": {
        "size": 32, "frames": 13, "sprites": 1, "speed_min": 1, "speed_max": 3, "sprite_size": 12,
        "channels": 16, "latent_dim": 128, "lstm_hidden": 64,
        "context": 10, "horizon": 3, "lr": 2e-3, "batch_size": 8, "epochs": 30,
        "stage_epochs": {"content": 50, "motion": 10, "gan": 20, "finetune": 10},
        "early_stop": True,
        "lambda1": 0.001, "lambda2": 1.0, "lambda3": 1.0, "lambda4": 1.0, "alpha": 1.0, "beta": 1000.0, "delta": 1.0,
    },
}


def preset_values(name: str) -> dict:
    try:
        return dict(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def synth_config(values: dict) -> SynthConfig:
    return SynthConfig(height=values["size"], width=values["size"], frames=values["frames"],
                       n_sprites=values["sprites"], speed_min=values["speed_min"],
                       speed_max=values["speed_max"], sprite_size=values["sprite_size"])


def net_config(values: dict, height: int, width: int) -> NetConfig:
    return NetConfig(height=height, width=width, channels=values["channels"], latent_dim=values["latent_dim"],
                     lstm_hidden=values["lstm_hidden"], context=values["context"])


def loss_weights(values: dict) -> LossWeights:
    return LossWeights(**{k: float(values[k]) for k in WEIGHT_KEYS})


def train_config(values: dict) -> TrainConfig:
    stage_epochs = values.get("stage_epochs")
    return TrainConfig(
        stage=values.get("stage", "all"), epochs=values["epochs"],
        stage_epochs=dict(stage_epochs) if stage_epochs else None, batch_size=values["batch_size"],
        lr=values["lr"], seed=values.get("seed", 0), context=values["context"], horizon=values["horizon"],
        weights=loss_weights(values), early_stop=values["early_stop"],
    )


def preset(name: str) -> dict:
    """Config objects for a preset: ``synth``, ``net`` and ``train``."""
    values = preset_values(name)
    return {"synth": synth_config(values), "net": net_config(values, values["size"], values["size"]),
            "train": train_config(values)}
