"""Prediction rule, diagnostic metrics, the PPK and sim-K SVM baselines, feature export."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.model_selection import GridSearchCV, StratifiedKFold
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC

from .dataio import LABELS, EncodedSet, Sample, encode_samples
from .model import DualHeadModel, extract_features

KC, NORMAL = 1, 0
RESULT_FIELDS = ("cell_id", "seed", "Se", "Sp", "Acc", "P_k", "N_k", "P_n", "N_n")
PREDICTION_FIELDS = ("id", "label", "pred_axial", "pred_tangential", "pred_final")


def _as_index(v) -> int:
    if isinstance(v, str):
        return LABELS.index(v)
    return int(v)


@dataclass(frozen=True)
class Metrics:
    P_k: int
    N_k: int
    P_n: int
    N_n: int

    def __post_init__(self):
        if not (0 <= self.P_k <= self.N_k and 0 <= self.P_n <= self.N_n):
            raise ValueError(f"inconsistent confusion counts {self}")

    @property
    def Se(self) -> float:
        return self.P_k / self.N_k if self.N_k else float("nan")

    @property
    def Sp(self) -> float:
        return self.P_n / self.N_n if self.N_n else float("nan")

    @property
    def Acc(self) -> float:
        n = self.N_k + self.N_n
        return (self.P_k + self.P_n) / n if n else float("nan")

    @classmethod
    def from_predictions(cls, labels, preds) -> Metrics:
        y = np.array([_as_index(v) for v in labels], dtype=int)
        p = np.array([_as_index(v) for v in preds], dtype=int)
        if y.shape != p.shape:
            raise ValueError("labels and predictions differ in length")
        return cls(
            P_k=int(np.sum((y == KC) & (p == KC))), N_k=int(np.sum(y == KC)),
            P_n=int(np.sum((y == NORMAL) & (p == NORMAL))), N_n=int(np.sum(y == NORMAL)),
        )

    def row(self) -> dict:
        return {"Se": self.Se, "Sp": self.Sp, "Acc": self.Acc,
                "P_k": self.P_k, "N_k": self.N_k, "P_n": self.P_n, "N_n": self.N_n}


def or_rule(pred_axial, pred_tangential):
    """Keratoconus if either head says keratoconus."""
    return np.maximum(np.asarray(pred_axial, dtype=int), np.asarray(pred_tangential, dtype=int))


@dataclass
class EvalResult:
    metrics: Metrics
    head_metrics: dict[str, Metrics]
    predictions: list[dict] = field(default_factory=list)

    def check_or_property(self) -> None:
        """Union of positives: combined Se >= each head's, combined Sp <= each head's."""
        for name, m in self.head_metrics.items():
            if m.N_k and self.metrics.Se < m.Se:
                raise AssertionError(f"OR-rule Se {self.metrics.Se} below {name} head Se {m.Se}")
            if m.N_n and self.metrics.Sp > m.Sp:
                raise AssertionError(f"OR-rule Sp {self.metrics.Sp} above {name} head Sp {m.Sp}")


@torch.no_grad()
def head_predictions(model: DualHeadModel, data: EncodedSet, batch_size: int = 64):
    was_training = model.training
    model.eval()
    pa, pt = [], []
    try:
        for i in range(0, len(data), batch_size):
            a, t = model(data.axial[i:i + batch_size], data.tangential[i:i + batch_size])
            pa.append(a.argmax(1))
            pt.append(t.argmax(1))
    finally:
        model.train(was_training)
    if not pa:
        return np.zeros(0, int), np.zeros(0, int)
    return torch.cat(pa).numpy(), torch.cat(pt).numpy()


def evaluate(model: DualHeadModel, data: EncodedSet, batch_size: int = 64) -> EvalResult:
    if len(data) == 0:
        raise ValueError("evaluate needs a nonempty sample set")
    pa, pt = head_predictions(model, data, batch_size)
    final = or_rule(pa, pt)
    y = data.y.numpy()
    preds = [
        {"id": sid, "label": LABELS[yy], "pred_axial": LABELS[a], "pred_tangential": LABELS[t], "pred_final": LABELS[f]}
        for sid, yy, a, t, f in zip(data.ids, y, pa, pt, final)
    ]
    return EvalResult(
        Metrics.from_predictions(y, final),
        {"axial": Metrics.from_predictions(y, pa), "tangential": Metrics.from_predictions(y, pt)},
        preds,
    )


def predict(model: DualHeadModel, sample: Sample, stats: dict, size: int | None = None) -> str:
    size = size or model.config.resolution
    data = encode_samples([sample], stats, size)
    pa, pt = head_predictions(model, data)
    return LABELS[int(or_rule(pa, pt)[0])]


def average_metrics(results) -> dict:
    """Mean Se/Sp/Acc over runs; confusion counts are summed."""
    results = list(results)
    out = {k: float(np.mean([getattr(m, k) for m in results])) for k in ("Se", "Sp", "Acc")}
    for k in ("P_k", "N_k", "P_n", "N_n"):
        out[k] = sum(getattr(m, k) for m in results)
    return out


def write_results(rows, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=RESULT_FIELDS, delimiter="\t", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in RESULT_FIELDS})
    return path


def write_predictions(preds, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=PREDICTION_FIELDS, delimiter="\t", lineterminator="\n")
        w.writeheader()
        w.writerows(preds)
    return path


def read_predictions(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f, delimiter="\t"))


# PPK bands, as fractions
PPK_SUSPECT = 0.20
PPK_KERATOCONUS = 0.45


def ppk_classify(ppk: float) -> str:
    if not 0.0 <= ppk <= 1.0:
        raise ValueError(f"ppk must be a fraction in [0, 1], got {ppk}")
    if ppk < PPK_SUSPECT:
        return "normal"
    if ppk < PPK_KERATOCONUS:
        return "suspect"
    return "keratoconus"


def binary_map(cls: str, suspect_as: str = "keratoconus") -> str:
    if cls == "suspect":
        return suspect_as
    if cls not in LABELS:
        raise ValueError(f"unknown PPK class {cls!r}")
    return cls


def ppk_baseline(samples, suspect_as: str = "keratoconus") -> Metrics:
    samples = [s for s in samples]
    missing = [s.id for s in samples if s.ppk is None]
    if missing:
        raise ValueError(f"{len(missing)} sample(s) without PPK, e.g. {missing[0]}")
    preds = [binary_map(ppk_classify(s.ppk), suspect_as) for s in samples]
    return Metrics.from_predictions([s.label for s in samples], preds)


def simk_features(simk1: float, simk2: float) -> np.ndarray:
    if simk1 < simk2:
        raise ValueError(f"simk1 ({simk1}) must be >= simk2 ({simk2})")
    return np.array([simk1, simk2, simk1 - simk2, (simk1 + simk2) / 2], dtype=np.float64)


@dataclass
class SvmConfig:
    C: tuple[float, ...] = (0.1, 1.0, 10.0, 100.0)
    gamma: tuple = ("scale", 0.1, 1.0)
    folds: int = 3
    seed: int = 0


class SvmModel:
    def __init__(self, estimator):
        self.estimator = estimator

    @property
    def params(self) -> dict:
        return self.estimator.best_params_


def svm_train(features, labels, config: SvmConfig | None = None) -> SvmModel:
    """RBF SVM on standardized features, C/gamma picked by stratified CV accuracy."""
    config = config or SvmConfig()
    X = np.asarray(features, dtype=np.float64)
    y = np.array([_as_index(v) for v in labels])
    counts = np.bincount(y, minlength=2)
    if counts.min() == 0:
        raise ValueError("svm_train needs both classes present")
    pipe = make_pipeline(StandardScaler(), SVC(kernel="rbf", class_weight="balanced"))
    folds = int(min(config.folds, counts.min()))
    grid = {"svc__C": list(config.C), "svc__gamma": list(config.gamma)}
    if folds >= 2:
        cv = StratifiedKFold(folds, shuffle=True, random_state=config.seed)
        est = GridSearchCV(pipe, grid, cv=cv, scoring="accuracy", refit=True).fit(X, y)
    else:
        est = GridSearchCV(pipe, grid, cv=[(np.arange(len(y)), np.arange(len(y)))], refit=True).fit(X, y)
    return SvmModel(est)


def svm_predict(model: SvmModel, features) -> list[str]:
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return [LABELS[int(v)] for v in model.estimator.predict(X)]


def simk_matrix(samples) -> np.ndarray:
    return np.stack([simk_features(s.simk1, s.simk2) for s in samples])


@torch.no_grad()
def feature_matrix(model: DualHeadModel, data: EncodedSet, head: str, batch_size: int = 64) -> np.ndarray:
    x = data.axial if head == "axial" else data.tangential
    chunks = [extract_features(model, x[i:i + batch_size], head) for i in range(0, len(data), batch_size)]
    width = model.config.hidden
    return torch.cat(chunks).numpy() if chunks else np.zeros((0, width), np.float32)


def export_features(model: DualHeadModel, data: EncodedSet, head: str, out_path: str | Path) -> np.ndarray:
    """Write one row per sample: id, label, then the FC2 activations."""
    feats = feature_matrix(model, data, head)
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with out_path.open("w", newline="") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            w.writerow(["id", "label"] + [f"f{i}" for i in range(feats.shape[1])])
            for sid, yy, row in zip(data.ids, data.y.tolist(), feats):
                w.writerow([sid, LABELS[yy]] + [repr(float(v)) for v in row])
    except OSError as e:
        raise OSError(f"cannot write feature table {out_path}: {e}") from e
    return feats


def centroid_distance(features: np.ndarray, labels) -> float:
    """Euclidean distance between the two class centroids."""
    y = np.asarray(labels)
    return float(np.linalg.norm(features[y == KC].mean(0) - features[y == NORMAL].mean(0)))
