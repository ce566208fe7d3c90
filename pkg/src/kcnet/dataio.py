"""Manifests, preprocessing (disc crop, resize, per-channel Z-norm), splits, sampling weights.

Manifest format: UTF-8, tab-separated, one sample per line with 9 fields::

    id  axial_path  tangential_path  simk1  simk2  ppk  label  source  seed

Lines starting with ``#`` are comments (``write_manifest`` emits the column
names as a comment header). ``ppk`` and ``seed`` may be empty. Image paths
are stored relative to the manifest's directory.
"""
from __future__ import annotations

import logging
import os
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
import torch

log = logging.getLogger(__name__)

FIELDS = ("id", "axial_path", "tangential_path", "simk1", "simk2", "ppk", "label", "source", "seed")
LABELS = ("normal", "keratoconus")
SOURCES = ("bench", "handheld")
MAPS = ("axial", "tangential")
SIGMA_FLOOR = 1e-6
BACKGROUND_TOL = 8  # max channel value still counted as background


class ManifestError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    axial_path: Path
    tangential_path: Path
    simk1: float
    simk2: float
    ppk: float | None
    label: str
    source: str
    seed: int | None = None

    def __post_init__(self):
        self.axial_path = Path(self.axial_path)
        self.tangential_path = Path(self.tangential_path)
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.simk1 < self.simk2:
            raise ValueError(f"{self.id}: simk1 ({self.simk1}) < simk2 ({self.simk2})")
        if self.ppk is not None and not 0.0 <= self.ppk <= 1.0:
            raise ValueError(f"{self.id}: ppk {self.ppk} outside [0, 1]")

    @property
    def y(self) -> int:
        """Class index: 0 normal, 1 keratoconus."""
        return LABELS.index(self.label)

    def image_path(self, which_map: str) -> Path:
        if which_map not in MAPS:
            raise ValueError(f"which_map must be one of {MAPS}, got {which_map!r}")
        return self.axial_path if which_map == "axial" else self.tangential_path


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_manifest(samples, path: str | Path) -> Path:
    path = Path(path)
    root = path.parent.resolve()
    lines = ["#" + "\t".join(FIELDS)]
    for s in samples:
        rel = [os.path.relpath(Path(p).resolve(), root) for p in (s.axial_path, s.tangential_path)]
        row = [s.id, *rel, _fmt(float(s.simk1)), _fmt(float(s.simk2)),
               _fmt(None if s.ppk is None else float(s.ppk)), s.label, s.source, _fmt(s.seed)]
        if any("\t" in f or "\n" in f for f in row):
            raise ManifestError(f"sample {s.id!r} has a field containing a tab or newline")
        lines.append("\t".join(row))
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write manifest {path}: {e}") from e
    return path


def read_manifest(path: str | Path) -> list[Sample]:
    path = Path(path)
    root = path.parent.resolve()
    samples = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != len(FIELDS):
            raise ManifestError(f"{path}:{lineno}: expected {len(FIELDS)} fields, got {len(parts)}")
        sid, ap, tp, k1, k2, ppk, label, source, seed = parts
        try:
            samples.append(Sample(
                sid, root / ap, root / tp, float(k1), float(k2),
                float(ppk) if ppk else None, label, source, int(seed) if seed else None,
            ))
        except ValueError as e:
            raise ManifestError(f"{path}:{lineno}: {e}") from e
    return samples


def validate_samples(samples) -> None:
    """Raise if any referenced image file is missing."""
    missing = [str(p) for s in samples for p in (s.axial_path, s.tangential_path) if not p.is_file()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} image file(s) missing, e.g. {missing[0]}")


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


@dataclass(frozen=True)
class ChannelStats:
    mu: tuple[float, float, float]
    sigma: tuple[float, float, float]
    n_samples: int

    def __post_init__(self):
        if min(self.sigma) <= 0:
            raise ValueError("sigma components must be > 0")

    @classmethod
    def identity(cls) -> ChannelStats:
        return cls((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0)

    def to_dict(self) -> dict:
        return {"mu": list(self.mu), "sigma": list(self.sigma), "n_samples": self.n_samples}

    @classmethod
    def from_dict(cls, d: dict) -> ChannelStats:
        return cls(tuple(d["mu"]), tuple(d["sigma"]), int(d["n_samples"]))


def compute_channel_stats(samples, which_map: str, sigma_floor: float = SIGMA_FLOOR) -> ChannelStats:
    """Per-channel mean/std of all pixels, on the [0, 1] scale.

    Sums are accumulated as exact integers, so the result does not depend on
    sample order or on how the work is partitioned.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("compute_channel_stats needs at least one sample")
    s1 = [0, 0, 0]
    s2 = [0, 0, 0]
    n = 0
    for s in samples:
        img = load_image(s.image_path(which_map)).astype(np.int64).reshape(-1, 3)
        n += img.shape[0]
        for c in range(3):
            s1[c] += int(img[:, c].sum())
            s2[c] += int((img[:, c] * img[:, c]).sum())
    mu = tuple(s1[c] / n / 255.0 for c in range(3))
    # var * n^2 as an exact integer before the single division
    var = tuple((s2[c] * n - s1[c] * s1[c]) / (n * n) / 255.0**2 for c in range(3))
    sigma = tuple(max(float(np.sqrt(v)), sigma_floor) for v in var)
    if any(np.sqrt(v) < sigma_floor for v in var):
        log.warning("degenerate %s channel statistics; sigma floored at %g", which_map, sigma_floor)
    return ChannelStats(mu, sigma, len(samples))


def disc_bbox(image: np.ndarray, tol: int = BACKGROUND_TOL) -> tuple[int, int, int, int] | None:
    """Bounding box (top, left, bottom, right) of the largest non-background region."""
    mask = image.max(axis=2) > tol
    if not mask.any():
        return None
    lab, n = ndimage.label(mask)
    if n > 1:
        sizes = ndimage.sum_labels(mask, lab, index=np.arange(1, n + 1))
        mask = lab == (int(np.argmax(sizes)) + 1)
    if mask.sum() < 0.001 * mask.size:
        return None
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def crop_disc(image: np.ndarray, pad: float = 0.05) -> tuple[np.ndarray, bool]:
    """Square crop around the corneal disc, kept inside the frame.

    Returns (crop, found). When no disc is found the crop is the centered
    full-frame square and ``found`` is False.
    """
    h, w = image.shape[:2]
    box = disc_bbox(image)
    if box is None:
        side = min(h, w)
        cy, cx = h / 2, w / 2
    else:
        t, l, b, r = box
        side = min(int(round(max(b - t, r - l) * (1 + pad))), h, w)
        cy, cx = (t + b) / 2, (l + r) / 2
    top = int(round(min(max(cy - side / 2, 0), h - side)))
    left = int(round(min(max(cx - side / 2, 0), w - side)))
    return image[top:top + side, left:left + side], box is not None


def crop_resize(image: np.ndarray, size: int = 512) -> tuple[np.ndarray, bool]:
    """Disc crop + resize; returns float32 (3, size, size) in [0, 1] and the found flag."""
    crop, found = crop_disc(image)
    out = np.asarray(Image.fromarray(crop).resize((size, size), Image.Resampling.BILINEAR))
    return (out.astype(np.float32) / 255.0).transpose(2, 0, 1).copy(), found


def normalize(tensor: np.ndarray, stats: ChannelStats) -> np.ndarray:
    mu = np.asarray(stats.mu, dtype=np.float32)[:, None, None]
    sigma = np.asarray(stats.sigma, dtype=np.float32)[:, None, None]
    return (tensor - mu) / sigma


def preprocess(image: np.ndarray, stats: ChannelStats, size: int = 512) -> np.ndarray:
    unit, found = crop_resize(image, size)
    if not found:
        log.warning("no corneal disc found; using the centered full-frame square")
    return normalize(unit, stats)


def background_value(stats: ChannelStats) -> np.ndarray:
    """Normalized value of a black background pixel, per channel."""
    return -np.asarray(stats.mu, dtype=np.float32) / np.asarray(stats.sigma, dtype=np.float32)


@dataclass
class SplitPlan:
    stage1_train: list[str]
    stage1_val: list[str]
    stage2_train: list[str]
    stage2_test: list[str]
    seed: int
    stage2_fraction: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _allocate(counts: dict[str, int], total: int) -> dict[str, int]:
    """Largest-remainder split of ``total`` across classes in proportion to counts."""
    n = sum(counts.values())
    exact = {k: total * c / n for k, c in counts.items()}
    out = {k: int(np.floor(v)) for k, v in exact.items()}
    order = sorted(counts, key=lambda k: (-(exact[k] - out[k]), k))
    for k in order[: total - sum(out.values())]:
        out[k] += 1
    return out


def stratified_split(samples, first_fraction: float, rng: np.random.Generator) -> tuple[list[str], list[str]]:
    by_label: dict[str, list[str]] = {}
    for s in sorted(samples, key=lambda s: s.id):
        by_label.setdefault(s.label, []).append(s.id)
    missing = [lab for lab in LABELS if lab not in by_label]
    if missing:
        raise ValueError(f"class(es) {missing} absent; cannot stratify")
    total = int(round(first_fraction * len(samples)))
    take = _allocate({k: len(v) for k, v in by_label.items()}, total)
    first, second = [], []
    for lab in LABELS:
        ids = [by_label[lab][i] for i in rng.permutation(len(by_label[lab]))]
        first += ids[: take[lab]]
        second += ids[take[lab]:]
    return first, second


def make_splits(bench, handheld, stage2_fraction: float = 0.5, seed: int = 0, val_fraction: float = 0.1) -> SplitPlan:
    """Stage-1 train/val from bench samples, stage-2 train/test from handheld samples."""
    if not 0 < stage2_fraction < 1:
        raise ValueError("stage2_fraction must be in (0, 1)")
    bench, handheld = list(bench), list(handheld)
    if not bench or not handheld:
        raise ValueError("both manifests must be nonempty")
    for name, group, src in (("bench", bench, "bench"), ("handheld", handheld, "handheld")):
        wrong = [s.id for s in group if s.source != src]
        if wrong:
            raise ValueError(f"{name} manifest contains non-{src} samples, e.g. {wrong[0]}")
    ss = np.random.SeedSequence(seed).spawn(2)
    s1_train, s1_val = stratified_split(bench, 1 - val_fraction, np.random.default_rng(ss[0]))
    s2_train, s2_test = stratified_split(handheld, stage2_fraction, np.random.default_rng(ss[1]))
    return SplitPlan(s1_train, s1_val, s2_train, s2_test, seed, stage2_fraction)


def subset_stage2(plan: SplitPlan, samples, n_keep: int) -> list[str]:
    """Stratified prefix of ``plan.stage2_train``; nested as ``n_keep`` grows."""
    labels = {s.id: s.label for s in samples}
    by_label: dict[str, list[str]] = {}
    for sid in plan.stage2_train:
        by_label.setdefault(labels[sid], []).append(sid)
    take = _allocate({k: len(v) for k, v in by_label.items()}, n_keep)
    for lab in LABELS:
        # keep both classes represented whenever possible
        if take.get(lab, 0) == 0 and by_label.get(lab) and n_keep >= 2:
            other = next(k for k in LABELS if k != lab)
            take[lab], take[other] = 1, take[other] - 1
    keep = {sid for lab in by_label for sid in by_label[lab][: take[lab]]}
    return [sid for sid in plan.stage2_train if sid in keep]


def sampler_weights(labels) -> list[float]:
    labels = list(labels)
    if not labels:
        raise ValueError("sampler_weights needs a nonempty label list")
    counts = Counter(labels)
    if len(counts) < 2:
        raise ValueError(f"both classes required, got only {set(counts)}")
    return [1.0 / counts[lab] for lab in labels]


class EncodedSet:
    """Normalized, resized tensors for a list of samples, ready for the model."""

    def __init__(self, ids, axial, tangential, y, fill, flagged=()):
        self.ids = list(ids)
        self.axial = axial
        self.tangential = tangential
        self.y = y
        self.fill = fill  # normalized background value per map, each (3,)
        self.flagged = list(flagged)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, ids) -> EncodedSet:
        pos = {sid: i for i, sid in enumerate(self.ids)}
        try:
            idx = torch.tensor([pos[sid] for sid in ids], dtype=torch.long)
        except KeyError as e:
            raise KeyError(f"sample {e.args[0]!r} not in this set") from None
        keep = set(ids)
        return EncodedSet(ids, self.axial[idx], self.tangential[idx], self.y[idx], self.fill,
                          [f for f in self.flagged if f in keep])


def encode_samples(samples, stats: dict[str, ChannelStats], size: int, cache: dict | None = None) -> EncodedSet:
    """Crop, resize and Z-normalize both maps of every sample.

    ``cache`` maps (path, size) to the un-normalized [0, 1] tensor, so repeated
    encodings with different statistics skip the image decoding.
    """
    samples = list(samples)
    cache = {} if cache is None else cache
    maps = {m: [] for m in MAPS}
    flagged = []
    for s in samples:
        for m in MAPS:
            key = (str(s.image_path(m)), size)
            if key not in cache:
                unit, found = crop_resize(load_image(s.image_path(m)), size)
                cache[key] = (unit, found)
            unit, found = cache[key]
            if not found:
                flagged.append(s.id)
            maps[m].append(normalize(unit, stats[m]))
    if flagged:
        log.warning("%d sample(s) fell back to a full-frame crop: %s", len(set(flagged)), sorted(set(flagged))[:5])
    shape = (0, 3, size, size)
    stack = {m: torch.from_numpy(np.stack(v)) if v else torch.empty(shape) for m, v in maps.items()}
    y = torch.tensor([s.y for s in samples], dtype=torch.long)
    fill = tuple(torch.from_numpy(background_value(stats[m])) for m in MAPS)
    return EncodedSet([s.id for s in samples], stack["axial"], stack["tangential"], y, fill, sorted(set(flagged)))
