"""Flat ``key = value`` run configuration covering the backbone, compositor and trainer."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

from .backbone import BackboneConfig
from .errors import ParseError
from .slc import SlcConfig
from .train import TrainConfig

SEED_ENV = "OWCZSL_SEED"

HELP = {
    "image_size": "input image side in pixels",
    "patch_size": "patch side in pixels",
    "d_model": "token width",
    "n_heads": "attention heads per block",
    "depth": "number of transformer blocks",
    "mlp_ratio": "MLP hidden width as a multiple of d_model",
    "k": "text candidates kept per primitive category",
    "norm_eps": "layernorm epsilon",
    "eta": "scale on the composed pair scores",
    "norm_mode": "normalisation before the outer product: softmax or l2",
    "head": "pair head: sparse or dense",
    "alpha_attr": "attribute loss weight",
    "alpha_obj": "object loss weight",
    "alpha_pair": "pair loss weight",
    "alpha_sel": "selector auxiliary loss weight",
    "base_lr": "peak learning rate of the top layer",
    "layer_decay": "per-layer learning rate decay factor",
    "weight_decay": "decoupled weight decay on matrices",
    "warmup_frac": "fraction of steps spent warming up",
    "final_lr_frac": "learning rate at the end as a fraction of the peak",
    "epochs": "training epochs",
    "batch_size": "samples per step",
    "seed": "random seed (overridden by $OWCZSL_SEED)",
    "crop_pad": "padding for random crops",
    "hflip_prob": "horizontal flip probability",
    "beta1": "Adam first-moment decay",
    "beta2": "Adam second-moment decay",
    "adam_eps": "Adam epsilon",
    "dtype": "float32 or float64 parameters",
    "emb": "optional embedding file used to initialise the text table",
}


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    slc: SlcConfig = field(default_factory=SlcConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dtype: str = "float32"
    emb: str = ""


def _registry():
    reg = {}
    for section, cls in (("backbone", BackboneConfig), ("slc", SlcConfig), ("train", TrainConfig)):
        for f in fields(cls):
            reg[f.name] = (section, type(getattr(cls(), f.name)))
    reg["dtype"] = (None, str)
    reg["emb"] = (None, str)
    return reg


REGISTRY = _registry()


def defaults_help() -> str:
    cfg = RunConfig()
    lines = []
    for key, (section, _) in REGISTRY.items():
        value = getattr(getattr(cfg, section), key) if section else getattr(cfg, key)
        lines.append(f"  {key} = {value}    {HELP.get(key, '')}")
    return "\n".join(lines)


def _convert(key, raw, typ, lineno):
    try:
        if typ is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        return typ(raw)
    except ValueError:
        raise ParseError(f"{key}: cannot read {raw!r} as {typ.__name__}", lineno) from None


def parse_config(text: str, env: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected key = value", lineno)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in REGISTRY:
            raise ParseError(f"unknown key {key!r}", lineno)
        section, typ = REGISTRY[key]
        value = _convert(key, raw, typ, lineno)
        setattr(getattr(cfg, section) if section else cfg, key, value)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        cfg.train.seed = int(env[SEED_ENV])
    if cfg.dtype not in ("float32", "float64"):
        raise ParseError(f"dtype must be float32 or float64, got {cfg.dtype!r}")
    cfg.slc.validate()
    cfg.train.validate()
    return cfg


def load_config(path, env: dict | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), env)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, (section, _) in REGISTRY.items():
        value = getattr(getattr(cfg, section), key) if section else getattr(cfg, key)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
