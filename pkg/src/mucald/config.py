"""Config-file loading for experiment runs.

Plain INI-style sections: [run], [model], [loss], [diffusion], [notears],
[ablation]. Every key is optional and falls back to the built-in default;
unknown keys are rejected with their full path.
"""
from __future__ import annotations

import configparser

from .causal_discovery import NotearsConfig
from .exceptions import ConfigError
from .objective import LossWeights
from .runtime import RunConfig

_RUN_KEYS = {
    "rounds": int, "local_epochs": int, "clients": int, "batch_size": int,
    "image_size": int, "train_samples": int, "val_samples": int, "test_samples": int,
    "data_noise": float, "seed": int, "variant": str, "families": "tuple",
    "capture_batches": int, "learning_rate": float,
    "warmup_epochs": int, "rampup_epochs": int,
}
_MODEL_KEYS = {
    "in_channels": int, "fe_widths": "int_tuple", "ss_width": int, "be_widths": "int_tuple",
    "exo_dim": int, "exo_hidden": int, "scm_hidden": int, "denoiser_hidden": int,
    "t_embed_dim": int, "disc_hidden": int, "proxy_features": "tuple",
    "proxy_target_class": int, "alpha_max": float,
}
_LOSS_KEYS = {"seg": float, "proxy": float, "diff": float, "klu": float,
              "klz": float, "adv": float}
_DIFFUSION_KEYS = {"timesteps": int, "offset": float}
_NOTEARS_KEYS = {
    "variant": str, "lambda1": float, "lambda2": float, "rho_init": float,
    "rho_max": float, "h_tolerance": float, "max_outer_iters": int,
    "inner_steps": int, "threshold": float, "top_k": int, "mlp_hidden": int,
}
_ABLATION_KEYS = {"flag": str}

_SECTIONS = {
    "run": _RUN_KEYS, "model": _MODEL_KEYS, "loss": _LOSS_KEYS,
    "diffusion": _DIFFUSION_KEYS, "notears": _NOTEARS_KEYS, "ablation": _ABLATION_KEYS,
}


def _coerce(section, key, raw, kind):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw.strip()
        if kind == "tuple":
            return tuple(part.strip() for part in raw.split(",") if part.strip())
        if kind == "int_tuple":
            return tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse value {raw!r}") from None
    raise ConfigError(f"{section}.{key}: unsupported kind {kind}")


def load_config(path):
    """Parse an experiment config file into a validated RunConfig."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file {path} not found or unreadable")

    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        keys = _SECTIONS[section]
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(f"unknown key {section}.{key}")
            values[(section, key)] = _coerce(section, key, raw, keys[key])

    cfg = RunConfig()
    for (section, key), value in values.items():
        if section in ("run", "model"):
            setattr(cfg, key, value)
        elif section == "diffusion":
            setattr(cfg, {"timesteps": "timesteps", "offset": "schedule_offset"}[key], value)
        elif section == "notears" and key == "variant":
            cfg.notears_variant = value
        elif section == "notears":
            setattr(cfg.notears, key, value)
        elif section == "ablation":
            flag = value.replace("-", "_").strip().lower()
            cfg.ablation = None if flag in ("", "none") else flag

    loss_fields = {f"lambda_{key}": values[("loss", key)]
                   for key in _LOSS_KEYS if ("loss", key) in values}
    if loss_fields:
        defaults = {f"lambda_{k}": getattr(LossWeights(), f"lambda_{k}") for k in _LOSS_KEYS}
        defaults.update(loss_fields)
        cfg.weights = LossWeights(**defaults)
    return cfg.validate()


DEFAULT_CONFIG_TEXT = """\
[run]
rounds = 24
local_epochs = 5
clients = 5
batch_size = 8
image_size = 32
train_samples = 200
val_samples = 36
test_samples = 40
seed = 0
variant = mucald
families = nested_rings, single_blob, two_objects, textured_region, irregular_blob

[model]
fe_widths = 8, 16
ss_width = 16
be_widths = 12, 8
exo_dim = 16
proxy_features = area, perimeter, circularity, solidity, mean_intensity, std_intensity, entropy, brightness

[loss]
seg = 1.0
proxy = 0.1
diff = 0.1
klu = 0.01
klz = 0.01
adv = 0.1

[diffusion]
timesteps = 100
offset = 0.008

[notears]
variant = mlp
lambda1 = 0.01
threshold = 0.3
top_k = 3

[ablation]
flag = none
"""


def write_default_config(path):
    with open(path, "w") as fh:
        fh.write(DEFAULT_CONFIG_TEXT)
