"""Training-time augmentation: geometric transforms shared by both maps, and mixup."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

# bounds of the domain-specific transforms used for the heatmaps
ROT_BOUNDS = (0.0, 10.0)
SCALE_BOUNDS = (0.6, 1.4)
TRANSLATE_BOUNDS = (0.01, 0.10)


def _within(r, bounds) -> bool:
    return bounds[0] <= r[0] <= r[1] <= bounds[1]


@dataclass
class GeomAugConfig:
    hflip_prob: float = 0.5
    rot_deg: tuple[float, float] = ROT_BOUNDS
    scale: tuple[float, float] = SCALE_BOUNDS
    translate_frac: tuple[float, float] = TRANSLATE_BOUNDS
    enabled: bool = True
    strict: bool = True  # False allows ranges outside the default bounds

    def __post_init__(self):
        self.rot_deg = tuple(map(float, self.rot_deg))
        self.scale = tuple(map(float, self.scale))
        self.translate_frac = tuple(map(float, self.translate_frac))
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError("hflip_prob must be a probability")
        for name, r in (("rot_deg", self.rot_deg), ("scale", self.scale), ("translate_frac", self.translate_frac)):
            if len(r) != 2 or r[0] > r[1]:
                raise ValueError(f"{name} must be a (low, high) pair")
        if self.strict and not (
            _within(self.rot_deg, ROT_BOUNDS)
            and _within(self.scale, SCALE_BOUNDS)
            and _within(self.translate_frac, TRANSLATE_BOUNDS)
        ):
            raise ValueError("augmentation ranges exceed the default bounds; pass strict=False to override")

    @classmethod
    def disabled(cls) -> GeomAugConfig:
        return cls(enabled=False)


@dataclass
class MixupConfig:
    alpha: float = 0.2
    enabled: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"mixup alpha must be > 0, got {self.alpha}")


@dataclass
class GeomParams:
    flip: np.ndarray  # (B,) bool
    angle: np.ndarray  # degrees, counterclockwise as displayed
    scale: np.ndarray
    tx: np.ndarray  # fraction of width, +right
    ty: np.ndarray  # fraction of height, +down


def draw_geom_params(config: GeomAugConfig, n: int, rng: np.random.Generator) -> GeomParams:
    flip = rng.random(n) < config.hflip_prob
    angle = rng.uniform(*config.rot_deg, size=n)
    scale = rng.uniform(*config.scale, size=n)
    mag = rng.uniform(*config.translate_frac, size=(2, n))
    sign = np.where(rng.random((2, n)) < 0.5, -1.0, 1.0)
    tx, ty = mag * sign
    return GeomParams(flip, angle, scale, tx, ty)


def affine_thetas(p: GeomParams) -> torch.Tensor:
    """Output->input maps in normalized coordinates, for square images.

    Forward map on pixel coordinates (y down, about the center c):
    q = c + s * R(angle) (p - c) + t.
    """
    a = np.deg2rad(p.angle)
    cos, sin = np.cos(a) / p.scale, np.sin(a) / p.scale
    tx, ty = 2 * p.tx, 2 * p.ty
    theta = np.zeros((len(a), 2, 3))
    theta[:, 0, 0], theta[:, 0, 1] = cos, -sin
    theta[:, 1, 0], theta[:, 1, 1] = sin, cos
    theta[:, 0, 2] = -(cos * tx - sin * ty)
    theta[:, 1, 2] = -(sin * tx + cos * ty)
    return torch.from_numpy(theta)


def warp(x: torch.Tensor, params: GeomParams, fill: torch.Tensor | None = None) -> torch.Tensor:
    """Flip then affine-warp a (B, C, H, W) batch; exposed pixels get ``fill`` (C,)."""
    if x.shape[-1] != x.shape[-2]:
        raise ValueError("geometric augmentation expects square images")
    out = x.clone()
    flip = torch.from_numpy(np.asarray(params.flip, dtype=bool))
    if flip.any():
        out[flip] = out[flip].flip(-1)
    moved = ~((params.angle == 0) & (params.scale == 1) & (params.tx == 0) & (params.ty == 0))
    if moved.any():
        idx = torch.from_numpy(np.flatnonzero(moved))
        fill_t = torch.zeros(x.shape[1], dtype=x.dtype) if fill is None else torch.as_tensor(fill, dtype=x.dtype)
        fill_t = fill_t.view(1, -1, 1, 1)
        sub = out[idx] - fill_t
        theta = affine_thetas(GeomParams(*(np.asarray(v)[moved] for v in params.__dict__.values())))
        grid = F.affine_grid(theta.to(x.dtype), list(sub.shape), align_corners=False)
        out[idx] = F.grid_sample(sub, grid, mode="bilinear", padding_mode="zeros", align_corners=False) + fill_t
    return out


def geometric_augment(axial: torch.Tensor, tangential: torch.Tensor, config: GeomAugConfig,
                      rng: np.random.Generator, fill=(None, None)):
    """Apply one random transform per sample, identically to both maps."""
    if not config.enabled:
        return axial, tangential
    params = draw_geom_params(config, axial.shape[0], rng)
    return warp(axial, params, fill[0]), warp(tangential, params, fill[1])


def draw_lambda(config: MixupConfig, rng: np.random.Generator) -> float:
    return float(rng.beta(config.alpha, config.alpha))


def mixup(x_i, y_i, x_j, y_j, lam: float):
    if x_i.shape != x_j.shape or y_i.shape != y_j.shape:
        raise ValueError(f"mixup shape mismatch: {tuple(x_i.shape)} vs {tuple(x_j.shape)}, "
                         f"{tuple(y_i.shape)} vs {tuple(y_j.shape)}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    return lam * x_i + (1 - lam) * x_j, lam * y_i + (1 - lam) * y_j


def mixup_batch(axial, tangential, targets, config: MixupConfig, rng: np.random.Generator):
    """Mix each sample with a partner from a batch permutation; one lambda per batch,
    shared by both maps of a pair."""
    if not config.enabled:
        return axial, tangential, targets
    lam = draw_lambda(config, rng)
    perm = torch.from_numpy(rng.permutation(axial.shape[0]))
    xa, y = mixup(axial, targets, axial[perm], targets[perm], lam)
    xt, _ = mixup(tangential, targets, tangential[perm], targets[perm], lam)
    return xa, xt, y
