"""Nested key-value config files (INI sections) with command-line overrides.

Keys are ``section.name`` (``pyramid.depth``, ``lffpm.base_width``,
``loss.lambda_s`` ...). The matching flag replaces dots and underscores with
dashes: ``--lffpm-base-width``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .blocks import ConfigError
from .data import DataConfig
from .hfrm import HfrmConfig
from .lffpm import LffpmConfig
from .losses import LossWeights
from .model import DEFAULT_SAT_THRESHOLD, ModelConfig
from .train import TrainConfig


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_float(v):
    s = str(v).strip().lower()
    return None if s in ("", "none", "off", "0") else float(v)


def _opt_int(v):
    s = str(v).strip().lower()
    return None if s in ("", "none") else int(v)


# key -> (type, default, help)
KEYS = {
    "pyramid.depth": (int, 3, "Laplacian pyramid depth (1..5)"),
    "lffpm.base_width": (int, 16, "LFFPM feature width"),
    "lffpm.n_fetb": (int, 2, "number of feature-extraction transformer blocks"),
    "lffpm.n_frtb": (int, 2, "number of feature-refinement transformer blocks"),
    "lffpm.unet_depth": (int, 3, "U-shape depth"),
    "lffpm.enc_blocks": (int, 1, "conv blocks per encoder level"),
    "lffpm.dec_blocks": (int, 1, "conv blocks per decoder level"),
    "lffpm.heads": (int, 2, "attention heads"),
    "lffpm.ffn_expansion": (int, 2, "gated FFN expansion factor"),
    "hfrm.mask_hidden": (int, 16, "mask network hidden width"),
    "hfrm.fuse_width": (int, 16, "dilated-conv lift width"),
    "hfrm.dilation": (int, 2, "dilation of the lift conv"),
    "hfrm.fab_reduction": (int, 4, "FAB squeeze-excitation reduction"),
    "loss.lambda_m": (float, 1.0, "MSE weight"),
    "loss.lambda_s": (float, 0.3, "SSIM weight"),
    "loss.lambda_p": (float, 0.7, "perceptual weight"),
    "train.lr": (float, 1e-4, "Adam learning rate"),
    "train.steps": (int, 1000, "optimizer steps"),
    "train.batch": (int, 2, "batch size"),
    "train.eval_every": (int, 0, "evaluate every N steps (0 = never)"),
    "train.clip_grad_norm": (_opt_float, 1.0, "global gradient-norm clip ('off' disables)"),
    "train.extractor_seed": (int, 0, "seed of the fixed perceptual feature extractor"),
    "data.patch": (int, 128, "training patch size"),
    "data.epoch_length": (_opt_int, None, "pairs per epoch (default bases x flares)"),
    "data.augment": (_bool, True, "random flare augmentation"),
    "data.workers": (int, 1, "prefetch workers"),
    "infer.sat_threshold": (float, DEFAULT_SAT_THRESHOLD, "luminance threshold for light-source blend-back"),
}

MODEL_SECTIONS = ("pyramid", "lffpm", "hfrm")


def flag_for(key: str) -> str:
    return "--" + key.replace(".", "-").replace("_", "-")


def dest_for(key: str) -> str:
    return "cfg__" + key.replace(".", "__")


def read_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    try:
        with open(path) as f:
            parser.read_file(f)
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    values = {}
    for section in parser.sections():
        for name, raw in parser.items(section):
            key = f"{section}.{name}"
            if key not in KEYS:
                raise ConfigError(f"{path}: unknown config key {key}")
            values[key] = raw
    return values


@dataclass
class Settings:
    values: dict

    def get(self, key):
        typ, default, _ = KEYS[key]
        raw = self.values.get(key, default)
        if raw is None:
            return None
        try:
            return typ(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {key}: {raw!r}") from e

    def model(self) -> ModelConfig:
        lffpm = {k.split(".", 1)[1]: self.get(k) for k in KEYS if k.startswith("lffpm.")}
        hfrm = {k.split(".", 1)[1]: self.get(k) for k in KEYS if k.startswith("hfrm.")}
        return ModelConfig(self.get("pyramid.depth"), LffpmConfig(**lffpm), HfrmConfig(**hfrm)).validate()

    def weights(self) -> LossWeights:
        try:
            return LossWeights(self.get("loss.lambda_m"), self.get("loss.lambda_s"), self.get("loss.lambda_p"))
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def train(self, seed: int) -> TrainConfig:
        return TrainConfig(
            lr=self.get("train.lr"), steps=self.get("train.steps"), batch=self.get("train.batch"),
            patch=self.get("data.patch"), seed=seed, weights=self.weights(),
            eval_every=self.get("train.eval_every"), clip_grad_norm=self.get("train.clip_grad_norm"),
            extractor_seed=self.get("train.extractor_seed"),
        ).validate()

    def data(self) -> DataConfig:
        return DataConfig(patch=self.get("data.patch"), epoch_length=self.get("data.epoch_length"),
                          augment=self.get("data.augment"), workers=self.get("data.workers"))


def add_config_flags(parser, sections):
    group = parser.add_argument_group("config overrides")
    for key, (_, default, help_) in KEYS.items():
        if key.split(".")[0] in sections:
            group.add_argument(flag_for(key), dest=dest_for(key), default=None, metavar="V",
                               help=f"{help_} [{key}, default {default}]")


def resolve(args) -> Settings:
    """File values first, then any flags the user actually passed."""
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for key in KEYS:
        v = getattr(args, dest_for(key), None)
        if v is not None:
            values[key] = v
    return Settings(values)
