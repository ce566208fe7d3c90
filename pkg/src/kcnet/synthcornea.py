"""Synthetic corneal topography: curvature fields, heatmap rendering, capture jitter.

Fields are sampled on a polar grid (radius in mm, angle in degrees measured
counterclockwise from the patient's right, image +x). A rendered heatmap puts
the corneal disc in the middle of a square image on a black background.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.integrate import cumulative_trapezoid

from .dataio import Sample, write_manifest

log = logging.getLogger(__name__)

KERATOCONUS = "keratoconus"
NORMAL = "normal"
LABELS = (NORMAL, KERATOCONUS)

N_R = 256
N_THETA = 256
MAX_RADIUS_MM = 4.5
SIMK_RING_MM = 1.5
CLAMP_D = (20.0, 80.0)
BACKGROUND = (0, 0, 0)
DISC_FRACTION = 0.9  # disc diameter / image side for an unperturbed render
CONE_THETA_RANGE = (200.0, 340.0)
PPK_RANGES = {NORMAL: (0.0, 0.15), KERATOCONUS: (0.5, 0.95)}


@dataclass(frozen=True)
class CorneaParams:
    base_power: float
    astig_magnitude: float
    astig_axis: float
    cone_amplitude: float
    cone_center_r: float
    cone_center_theta: float
    cone_sigma: float
    noise_sigma: float
    label: str
    seed: int

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.noise_sigma < 0 or self.cone_sigma <= 0:
            raise ValueError("noise_sigma must be >= 0 and cone_sigma > 0")

    def check_ranges(self) -> list[str]:
        """Names of fields outside the sampling ranges (empty when valid)."""
        bad = []
        if not 40 <= self.base_power <= 48:
            bad.append("base_power")
        if not 0 <= self.astig_magnitude <= 3:
            bad.append("astig_magnitude")
        if not 0 <= self.astig_axis < 180:
            bad.append("astig_axis")
        if self.label == NORMAL and self.cone_amplitude != 0:
            bad.append("cone_amplitude")
        if self.label == KERATOCONUS and not 5 <= self.cone_amplitude <= 25:
            bad.append("cone_amplitude")
        if not 0.5 <= self.cone_sigma <= 2.0:
            bad.append("cone_sigma")
        if not 0.5 <= self.cone_center_r <= 2.5:
            bad.append("cone_center_r")
        return bad


def sample_cornea_params(
    label: str,
    rng: np.random.Generator,
    noise_sigma: float = 0.3,
    cone_theta_range: tuple[float, float] = CONE_THETA_RANGE,
) -> CorneaParams:
    if label not in LABELS:
        raise ValueError(f"label must be one of {LABELS}, got {label!r}")
    base = rng.uniform(40.0, 48.0)
    astig = rng.uniform(0.0, 3.0)
    axis = rng.uniform(0.0, 180.0)
    amp = rng.uniform(5.0, 25.0)
    r_c = rng.uniform(0.5, 2.5)
    th_c = rng.uniform(*cone_theta_range) % 360.0
    sig = rng.uniform(0.5, 2.0)
    seed = int(rng.integers(0, 2**31 - 1))
    return CorneaParams(
        base_power=float(base),
        astig_magnitude=float(astig),
        astig_axis=float(axis),
        cone_amplitude=float(amp) if label == KERATOCONUS else 0.0,
        cone_center_r=float(r_c),
        cone_center_theta=float(th_c),
        cone_sigma=float(sig),
        noise_sigma=noise_sigma,
        label=label,
        seed=seed,
    )


@dataclass
class CurvatureField:
    kind: str  # "tangential" | "axial"
    values: np.ndarray  # (n_r, n_theta) diopters
    max_radius: float = MAX_RADIUS_MM

    def __post_init__(self):
        if self.kind not in ("tangential", "axial"):
            raise ValueError(f"kind must be tangential or axial, got {self.kind!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("values must be a 2-D (n_r, n_theta) grid")

    @property
    def radii(self) -> np.ndarray:
        return np.linspace(0.0, self.max_radius, self.values.shape[0])

    @property
    def thetas(self) -> np.ndarray:
        n = self.values.shape[1]
        return np.arange(n) * (360.0 / n)

    @classmethod
    def from_function(cls, fn, kind="tangential", n_r=N_R, n_theta=N_THETA, max_radius=MAX_RADIUS_MM):
        """Sample ``fn(r_mm, theta_deg)`` on the polar grid."""
        r = np.linspace(0.0, max_radius, n_r)[:, None]
        th = (np.arange(n_theta) * (360.0 / n_theta))[None, :]
        return cls(kind, np.broadcast_to(fn(r, th), (n_r, n_theta)).copy(), max_radius)


def tangential_field(params: CorneaParams, n_r=N_R, n_theta=N_THETA, max_radius=MAX_RADIUS_MM) -> CurvatureField:
    r = np.linspace(0.0, max_radius, n_r)[:, None]
    th = np.deg2rad(np.arange(n_theta) * (360.0 / n_theta))[None, :]
    k = params.base_power + params.astig_magnitude * np.cos(2 * (th - np.deg2rad(params.astig_axis)))
    k = np.broadcast_to(k, (n_r, n_theta)).copy()
    if params.cone_amplitude:
        tc = np.deg2rad(params.cone_center_theta)
        dx = r * np.cos(th) - params.cone_center_r * np.cos(tc)
        dy = r * np.sin(th) - params.cone_center_r * np.sin(tc)
        k += params.cone_amplitude * np.exp(-(dx**2 + dy**2) / (2 * params.cone_sigma**2))
    if params.noise_sigma > 0:
        k += np.random.default_rng(params.seed).normal(0.0, params.noise_sigma, size=k.shape)
    return CurvatureField("tangential", np.clip(k, *CLAMP_D), max_radius)


def axial_from_tangential(field: CurvatureField) -> CurvatureField:
    """Radial running mean of tangential power along each meridian."""
    if field.kind != "tangential":
        raise ValueError(f"axial_from_tangential needs a tangential field, got {field.kind}")
    r = field.radii
    integral = cumulative_trapezoid(field.values, r, axis=0, initial=0.0)
    out = np.empty_like(field.values)
    out[0] = field.values[0]
    out[1:] = integral[1:] / r[1:, None]
    return CurvatureField("axial", out, field.max_radius)


def _ring(field: CurvatureField, radius: float) -> np.ndarray:
    r = field.radii
    i = min(int(np.searchsorted(r, radius, side="right")) - 1, len(r) - 2)
    w = (radius - r[i]) / (r[i + 1] - r[i])
    return (1 - w) * field.values[i] + w * field.values[i + 1]


def _periodic_interp(values: np.ndarray, theta_deg, period=360.0) -> np.ndarray:
    th = np.arange(len(values)) * (period / len(values))
    return np.interp(np.asarray(theta_deg) % period, th, values, period=period)


def compute_simk(field: CurvatureField, ring_mm: float = SIMK_RING_MM) -> tuple[float, float]:
    """(steep, flat) meridian powers on the sim-K ring of an axial map."""
    if field.kind != "axial":
        raise ValueError(f"compute_simk needs an axial field, got {field.kind}")
    if field.max_radius < ring_mm:
        raise ValueError(f"field radius {field.max_radius} mm is smaller than the {ring_mm} mm sim-K ring")
    ring = _ring(field, ring_mm)
    th = field.thetas
    meridian = 0.5 * (ring + _periodic_interp(ring, th + 180.0))
    j = int(np.argmax(meridian))
    simk1 = float(meridian[j])
    simk2 = float(_periodic_interp(meridian, th[j] + 90.0))
    return simk1, min(simk1, simk2)


@dataclass(frozen=True)
class ColorScale:
    bounds: tuple[float, ...]  # lower bound of each bin, diopters
    colors: tuple[tuple[int, int, int], ...]
    lower_clamp: float
    upper_clamp: float

    def __post_init__(self):
        b = np.asarray(self.bounds)
        if len(b) < 16 or np.any(np.diff(b) <= 0):
            raise ValueError("color scale needs >= 16 strictly increasing bins")
        if len(self.colors) != len(b):
            raise ValueError("one color per bin required")

    def bin_index(self, values) -> np.ndarray:
        v = np.clip(np.asarray(values, dtype=np.float64), self.lower_clamp, self.upper_clamp)
        idx = np.searchsorted(np.asarray(self.bounds), v, side="right") - 1
        return np.clip(idx, 0, len(self.bounds) - 1)

    def colorize(self, values) -> np.ndarray:
        return np.asarray(self.colors, dtype=np.uint8)[self.bin_index(values)]


_ANCHORS = np.array([(0, 0, 255), (0, 255, 255), (0, 255, 0), (255, 255, 0), (255, 0, 0)], dtype=np.float64)


def default_color_scale(n_bins: int = 24, start: float = 30.0, step: float = 1.5) -> ColorScale:
    t = np.linspace(0.0, len(_ANCHORS) - 1, n_bins)
    rgb = np.stack([np.interp(t, np.arange(len(_ANCHORS)), _ANCHORS[:, c]) for c in range(3)], axis=1)
    rgb = np.rint(rgb).astype(int)
    return ColorScale(
        bounds=tuple(start + step * np.arange(n_bins)),
        colors=tuple(tuple(int(x) for x in row) for row in rgb),
        lower_clamp=start,
        upper_clamp=start + step * n_bins,
    )


def _disc_coords(resolution: int, max_radius: float, disc_fraction: float):
    c = (np.arange(resolution) + 0.5) - resolution / 2
    x, y = np.meshgrid(c, -c)
    radius_px = disc_fraction * resolution / 2
    r_mm = np.hypot(x, y) / radius_px * max_radius
    th = np.degrees(np.arctan2(y, x)) % 360.0
    return r_mm, th, r_mm <= max_radius


def sample_field_image(field: CurvatureField, resolution: int, disc_fraction: float = DISC_FRACTION):
    """Bilinear polar-to-Cartesian resampling. Returns (values, in_disc mask)."""
    r_mm, th, inside = _disc_coords(resolution, field.max_radius, disc_fraction)
    n_r, n_t = field.values.shape
    fr = np.clip(r_mm[inside] / field.max_radius * (n_r - 1), 0, n_r - 1)
    ft = th[inside] / 360.0 * n_t
    r0 = np.minimum(fr.astype(int), n_r - 2)
    t0 = ft.astype(int) % n_t
    t1 = (t0 + 1) % n_t
    wr = fr - r0
    wt = ft - np.floor(ft)
    v = field.values
    vals = (
        (1 - wr) * (1 - wt) * v[r0, t0]
        + (1 - wr) * wt * v[r0, t1]
        + wr * (1 - wt) * v[r0 + 1, t0]
        + wr * wt * v[r0 + 1, t1]
    )
    out = np.full((resolution, resolution), np.nan)
    out[inside] = vals
    return out, inside


def render_heatmap(
    field: CurvatureField,
    color_scale: ColorScale | None = None,
    resolution_px: int = 512,
    disc_fraction: float = DISC_FRACTION,
) -> np.ndarray:
    """uint8 (H, W, 3) heatmap; pixels outside the disc are BACKGROUND."""
    if resolution_px <= 0:
        raise ValueError("resolution must be positive")
    scale = color_scale or default_color_scale()
    vals, inside = sample_field_image(field, resolution_px, disc_fraction)
    img = np.empty((resolution_px, resolution_px, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    img[inside] = scale.colorize(vals[inside])
    return img


@dataclass(frozen=True)
class CaptureProfile:
    name: str
    zoom_range: tuple[float, float] = (1.0, 1.0)
    translate_max: float = 0.0
    aspect_range: tuple[float, float] = (1.0, 1.0)
    enabled: bool = True

    def __post_init__(self):
        if self.zoom_range[0] > self.zoom_range[1] or self.aspect_range[0] > self.aspect_range[1]:
            raise ValueError("profile ranges must be (low, high)")
        if min(self.zoom_range) <= 0 or min(self.aspect_range) <= 0 or self.translate_max < 0:
            raise ValueError("zoom and aspect must be positive, translate_max >= 0")

    @property
    def is_identity(self) -> bool:
        return not self.enabled or (
            self.zoom_range == (1.0, 1.0) and self.translate_max == 0 and self.aspect_range == (1.0, 1.0)
        )


BENCH = CaptureProfile("bench")
HANDHELD = CaptureProfile("handheld", zoom_range=(0.7, 1.3), translate_max=0.08, aspect_range=(0.9, 1.1))
PROFILES = {"bench": BENCH, "handheld": HANDHELD}


@dataclass(frozen=True)
class CaptureParams:
    zoom: float = 1.0
    tx: float = 0.0  # fraction of width, +right
    ty: float = 0.0  # fraction of height, +down
    aspect: float = 1.0  # horizontal / vertical magnification


def draw_capture(profile: CaptureProfile, rng: np.random.Generator) -> CaptureParams:
    if profile.is_identity:
        return CaptureParams()
    return CaptureParams(
        zoom=float(rng.uniform(*profile.zoom_range)),
        tx=float(rng.uniform(-profile.translate_max, profile.translate_max)),
        ty=float(rng.uniform(-profile.translate_max, profile.translate_max)),
        aspect=float(rng.uniform(*profile.aspect_range)),
    )


def warp_capture(image: np.ndarray, params: CaptureParams, background=BACKGROUND) -> np.ndarray:
    """Scale about the image center, then shift. Output keeps the input size."""
    if params == CaptureParams():
        return image.copy()
    h, w = image.shape[:2]
    sx, sy = params.zoom * params.aspect, params.zoom
    cx, cy = w / 2, h / 2
    dx, dy = params.tx * w, params.ty * h
    # PIL wants the output -> input map
    coeffs = (1 / sx, 0.0, cx - (cx + dx) / sx, 0.0, 1 / sy, cy - (cy + dy) / sy)
    out = Image.fromarray(image).transform(
        (w, h), Image.Transform.AFFINE, coeffs, resample=Image.Resampling.BILINEAR, fillcolor=tuple(background)
    )
    return np.asarray(out)


def apply_capture_perturbation(image: np.ndarray, profile: CaptureProfile, rng: np.random.Generator) -> np.ndarray:
    return warp_capture(image, draw_capture(profile, rng))


def _sample_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _make_one(job) -> tuple:
    sid, label, seed, profile, out_dir, resolution, scale = job
    rng = np.random.default_rng(seed)
    params = sample_cornea_params(label, rng)
    tan = tangential_field(params)
    ax = axial_from_tangential(tan)
    simk1, simk2 = compute_simk(ax)
    ppk = float(rng.uniform(*PPK_RANGES[label]))
    capture = draw_capture(profile, rng)
    paths = []
    for kind, fld in (("axial", ax), ("tangential", tan)):
        img = warp_capture(render_heatmap(fld, scale, resolution), capture)
        p = Path(out_dir) / "images" / f"{sid}_{kind}.png"
        try:
            Image.fromarray(img).save(p, format="PNG")
        except OSError as e:
            raise OSError(f"failed to write {p}: {e}") from e
        paths.append(p)
    return Sample(sid, paths[0], paths[1], simk1, simk2, ppk, label, profile.name, seed)


def generate_dataset(
    n_normal: int,
    n_keratoconus: int,
    profile: CaptureProfile | str,
    out_dir: str | Path,
    seed: int,
    resolution: int = 512,
    color_scale: ColorScale | None = None,
    workers: int = 1,
    manifest_name: str = "manifest.tsv",
) -> list[Sample]:
    """Render a labeled dataset and write ``out_dir/manifest.tsv``.

    Each sample is a pure function of its derived seed, so the output is
    identical for any worker count.
    """
    if n_normal < 0 or n_keratoconus < 0:
        raise ValueError("sample counts must be >= 0")
    if isinstance(profile, str):
        profile = PROFILES[profile]
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out_dir}: {e}") from e
    scale = color_scale or default_color_scale()
    labels = [NORMAL] * n_normal + [KERATOCONUS] * n_keratoconus
    seeds = _sample_seeds(seed, len(labels))
    jobs = [
        (f"{profile.name}-{i:05d}", lab, s, profile, out_dir, resolution, scale)
        for i, (lab, s) in enumerate(zip(labels, seeds))
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            samples = list(ex.map(_make_one, jobs, chunksize=8))
    else:
        samples = [_make_one(j) for j in jobs]
    write_manifest(samples, out_dir / manifest_name)
    log.info("wrote %d samples (%s) to %s", len(samples), profile.name, out_dir)
    return samples


def default_workers() -> int:
    return max(1, min(8, os.cpu_count() or 1))

