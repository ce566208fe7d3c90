"""Run profiles, INI-style config files and seed derivation.

Config files use :mod:`configparser` syntax. Recognized sections and keys::

    [run]      profile, seed, deterministic, backbone_weights
    [data]     stats_policy (stage1_train | all_bench | union), stage2_fraction, val_fraction
    [model]    resolution, width, n_stages, dropout_p
    [stage1]   / [stage2]
               epochs, lr_init, momentum, batch_size, freeze (comma list), checkpoint_policy,
               geom_aug (on/off), mixup (on/off), mixup_alpha, hflip_prob,
               rot_deg, scale, translate_frac (each "low,high")

Anything not given falls back to the profile, then to the built-in defaults.
"""
from __future__ import annotations

import configparser
import json
import zlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .augment import GeomAugConfig, MixupConfig
from .model import ModelConfig
from .train import TrainConfig


@dataclass(frozen=True)
class Profile:
    name: str
    resolution: int  # network input side
    render_resolution: int  # generated heatmap side
    width: int
    epochs1: int
    epochs2: int
    lr1: float = 1e-3
    lr2: float = 1e-4


PROFILES = {
    "full": Profile("full", 512, 512, 64, 200, 100),
    "desk": Profile("desk", 128, 512, 64, 30, 15),
    # single-core CI budget: same block topology at 1/4 width; a short budget
    # from random init needs the larger step in both stages
    "ci": Profile("ci", 64, 256, 16, 50, 30, lr1=1e-2, lr2=1e-2),
}

AUGMENTATIONS = {
    "none": (False, False),
    "mixup": (False, True),
    "domain": (True, False),
    "domain+mixup": (True, True),
}


def stage2_aug(aug: str) -> str:
    """Stage-2 setting for a cell's augmentation: mixup applies to stage 1 only."""
    return "domain" if AUGMENTATIONS[aug][0] else "none"


def sub_seed(seed: int, name: str) -> int:
    """Named, independent child seed of ``seed``."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def aug_configs(aug: str, geom: GeomAugConfig | None = None, mix: MixupConfig | None = None):
    if aug not in AUGMENTATIONS:
        raise ValueError(f"unknown augmentation setting {aug!r}; expected one of {list(AUGMENTATIONS)}")
    use_geom, use_mix = AUGMENTATIONS[aug]
    geom = replace(geom or GeomAugConfig(), enabled=use_geom)
    mix = replace(mix or MixupConfig(), enabled=use_mix)
    return geom, mix


def model_config(profile: Profile, seed: int = 0, **overrides) -> ModelConfig:
    kw = {"resolution": profile.resolution, "width": profile.width, "seed": seed, "frozen_stages": (1, 2, 3)}
    kw.update(overrides)
    return ModelConfig(**kw)


def stage_config(stage: int, profile: Profile, aug: str = "domain+mixup", seed: int = 0, **overrides) -> TrainConfig:
    geom, mix = aug_configs(aug, overrides.pop("geom_aug", None), overrides.pop("mixup", None))
    kw = {"stage": stage, "epochs": profile.epochs1 if stage == 1 else profile.epochs2,
          "lr_init": profile.lr1 if stage == 1 else profile.lr2,
          "geom_aug": geom, "mixup": mix, "seed": seed}
    kw.update(overrides)
    return TrainConfig(**kw)


def _pair(s: str) -> tuple[float, float]:
    a, b = (float(x) for x in s.split(","))
    return a, b


def read_config(path: str | Path | None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cp.read(path)
    return cp


def stage_overrides(cp: configparser.ConfigParser, stage: int) -> dict:
    """TrainConfig keyword overrides from a ``[stageN]`` section."""
    sec = f"stage{stage}"
    if not cp.has_section(sec):
        return {}
    s = cp[sec]
    out: dict = {}
    for key, conv in (("epochs", int), ("lr_init", float), ("momentum", float), ("batch_size", int),
                      ("checkpoint_policy", str)):
        if key in s:
            out[key] = conv(s[key])
    if "freeze" in s:
        out["freeze"] = tuple(int(x) for x in s["freeze"].split(",") if x.strip())
    geom = {}
    if "hflip_prob" in s:
        geom["hflip_prob"] = s.getfloat("hflip_prob")
    for key in ("rot_deg", "scale", "translate_frac"):
        if key in s:
            geom[key] = _pair(s[key])
    if geom:
        out["geom_aug"] = GeomAugConfig(**geom)
    if "mixup_alpha" in s:
        out["mixup"] = MixupConfig(alpha=s.getfloat("mixup_alpha"))
    return out


def stage_aug(cp: configparser.ConfigParser, stage: int, default: str | None = None) -> str:
    default = default or ("domain+mixup" if stage == 1 else stage2_aug("domain+mixup"))
    sec = f"stage{stage}"
    if not cp.has_section(sec):
        return default
    g = cp[sec].getboolean("geom_aug", fallback=AUGMENTATIONS[default][0])
    m = cp[sec].getboolean("mixup", fallback=AUGMENTATIONS[default][1])
    return {v: k for k, v in AUGMENTATIONS.items()}[(g, m)]


def write_echo(path: str | Path, **sections) -> Path:
    """Dump every effective setting of a run as sorted JSON."""
    def norm(v):
        if hasattr(v, "__dataclass_fields__"):
            return norm(asdict(v))
        if isinstance(v, dict):
            return {str(k): norm(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [norm(x) for x in v]
        if isinstance(v, Path):
            return str(v)
        return v

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(norm(sections), indent=2, sort_keys=True) + "\n")
    return path
