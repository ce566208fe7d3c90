"""Weighted loss, learning-rate schedules and the two fine-tuning stages."""
from __future__ import annotations

import copy
import json
import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import WeightedRandomSampler

from .augment import GeomAugConfig, MixupConfig, geometric_augment, mixup_batch
from .dataio import LABELS, EncodedSet, sampler_weights
from .evalx import Metrics, evaluate
from .model import DualHeadModel, apply_freeze, save_checkpoint, trainable_parameters

log = logging.getLogger(__name__)

LOG_EPS = 1e-7
STAGE_DEFAULTS = {
    1: {"lr_init": 1e-3, "epochs": 200, "schedule": "constant", "checkpoint_policy": "best_val"},
    2: {"lr_init": 1e-4, "epochs": 100, "schedule": "linear", "checkpoint_policy": "last"},
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: int = 1
    lr_init: float | None = None
    epochs: int | None = None
    schedule: str | None = None  # constant | linear
    momentum: float = 0.9
    batch_size: int = 32
    freeze: tuple[int, ...] = (1, 2, 3)
    geom_aug: GeomAugConfig = field(default_factory=GeomAugConfig)
    mixup: MixupConfig = field(default_factory=MixupConfig)
    seed: int = 0
    checkpoint_policy: str | None = None  # best_val | last
    deterministic: bool = True

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        for k, v in STAGE_DEFAULTS[self.stage].items():
            if getattr(self, k) is None:
                setattr(self, k, v)
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.checkpoint_policy not in ("best_val", "last"):
            raise ValueError(f"unknown checkpoint policy {self.checkpoint_policy!r}")
        self.freeze = tuple(self.freeze)

    def echo(self) -> dict:
        d = asdict(self)
        d["freeze"] = list(self.freeze)
        return d


@dataclass
class ClassWeights:
    w_normal: float
    w_keratoconus: float

    def tensor(self) -> torch.Tensor:
        return torch.tensor([self.w_normal, self.w_keratoconus])


def class_weights(train_labels) -> ClassWeights:
    """Inverse-frequency weights scaled to sum to 2."""
    counts = Counter(LABELS[v] if isinstance(v, (int, np.integer)) else v for v in train_labels)
    if counts["normal"] == 0 or counts["keratoconus"] == 0:
        raise ValueError(f"both classes required, got counts {dict(counts)}")
    inv_n, inv_k = 1 / counts["normal"], 1 / counts["keratoconus"]
    z = inv_n + inv_k
    return ClassWeights(2 * inv_n / z, 2 * inv_k / z)


def weighted_ce(probs: torch.Tensor, target: torch.Tensor, weights) -> torch.Tensor:
    """Batch mean of -sum_c w_c t_c log p_c; targets may be soft."""
    w = weights.tensor() if isinstance(weights, ClassWeights) else torch.as_tensor(weights)
    w = w.to(probs.dtype)
    return -(w * target.to(probs.dtype) * torch.log(probs.clamp_min(LOG_EPS))).sum(1).mean()


def combined_loss(p_axial, p_tangential, target, weights) -> torch.Tensor:
    return weighted_ce(p_axial, target, weights) + weighted_ce(p_tangential, target, weights)


def lr_at(epoch: int, config: TrainConfig) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.schedule == "constant":
        return config.lr_init
    return config.lr_init * (1 - epoch / config.epochs)


@dataclass
class StageResult:
    checkpoint: Path | None
    loss_trace: list[float]
    val_trace: list[Metrics]
    wall_time: float
    best_epoch: int | None = None

    def summary(self) -> dict:
        return {
            "checkpoint": str(self.checkpoint) if self.checkpoint else None,
            "loss_trace": self.loss_trace,
            "val_trace": [m.row() for m in self.val_trace],
            "wall_time": self.wall_time,
            "best_epoch": self.best_epoch,
        }


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


@torch.no_grad()
def calibrate_batchnorm(model: DualHeadModel, data: EncodedSet, batch_size: int = 64) -> None:
    """Re-estimate BatchNorm running statistics on ``data`` (cumulative average).

    Used when the backbone has no pretrained weights: frozen stages otherwise
    keep the identity statistics of a fresh initialization.
    """
    bns = [m for m in model.backbone.modules() if isinstance(m, torch.nn.BatchNorm2d)]
    saved = [(m.momentum, m.training) for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
        m.train()
    try:
        for i in range(0, len(data), batch_size):
            model.backbone(torch.cat([data.axial[i:i + batch_size], data.tangential[i:i + batch_size]]))
    finally:
        for m, (mom, tr) in zip(bns, saved):
            m.momentum = mom
            m.train(tr)


def _epoch_batches(n: int, weights, batch_size: int, gen: torch.Generator) -> list[torch.Tensor]:
    sampler = WeightedRandomSampler(weights, num_samples=n, replacement=True, generator=gen)
    idx = torch.tensor(list(sampler), dtype=torch.long)
    return list(idx.split(batch_size))


def run_stage(
    model: DualHeadModel,
    train_set: EncodedSet,
    val_set: EncodedSet | None,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    name: str = "stage",
    meta: dict | None = None,
) -> StageResult:
    """Weighted sampler -> geometric aug -> mixup -> forward -> loss -> SGD, per batch."""
    t0 = time.perf_counter()
    set_determinism(config.seed, config.deterministic)
    apply_freeze(model, config.freeze)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / f"{name}_log.jsonl"
        log_path.write_text("")

    labels = train_set.y.tolist()
    cw = class_weights(labels)
    weights = sampler_weights(labels)
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.SGD(trainable_parameters(model), lr=config.lr_init, momentum=config.momentum)
    log.info("%s: %d train samples, class weights %s, config %s", name, len(train_set), cw, config.echo())

    loss_trace, val_trace = [], []
    best_acc, best_epoch, best_state = -1.0, None, None
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        total, count = 0.0, 0
        for b, idx in enumerate(_epoch_batches(len(train_set), weights, config.batch_size, gen)):
            xa, xt = train_set.axial[idx], train_set.tangential[idx]
            target = torch.nn.functional.one_hot(train_set.y[idx], 2).float()
            xa, xt = geometric_augment(xa, xt, config.geom_aug, rng, train_set.fill)
            xa, xt, target = mixup_batch(xa, xt, target, config.mixup, rng)
            pa, pt = model(xa, xt)
            loss = combined_loss(pa, pt, target, cw)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"{name}: non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        loss_trace.append(total / count)

        eval_set = val_set if val_set is not None and len(val_set) else train_set
        m = evaluate(model, eval_set).metrics
        val_trace.append(m)
        if m.Acc > best_acc:
            best_acc, best_epoch = m.Acc, epoch
            if config.checkpoint_policy == "best_val":
                best_state = copy.deepcopy(model.state_dict())
        if log_path is not None:
            rec = {"epoch": epoch, "lr": lr, "loss": loss_trace[-1], **m.row()}
            with log_path.open("a") as f:
                f.write(json.dumps(rec) + "\n")

    if config.checkpoint_policy == "best_val" and best_state is not None:
        model.load_state_dict(best_state)
    elif config.checkpoint_policy == "last":
        best_epoch = config.epochs - 1 if config.epochs else None
    model.eval()
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(model, out_dir / f"{name}.pt", stage=config.stage, best_epoch=best_epoch,
                               train_config=config.echo(), **(meta or {}))
    return StageResult(ckpt, loss_trace, val_trace, time.perf_counter() - t0, best_epoch)


def train_stage1(model, train_set: EncodedSet, val_set: EncodedSet, config: TrainConfig | None = None,
                 out_dir=None, meta: dict | None = None) -> StageResult:
    config = config or TrainConfig(stage=1)
    if config.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 config")
    return run_stage(model, train_set, val_set, config, out_dir, name="stage1", meta=meta)


def train_stage2(model, train_set: EncodedSet, config: TrainConfig | None = None, test_ids=(),
                 out_dir=None, meta: dict | None = None) -> StageResult:
    """Stage-2 fine-tuning; monitoring uses the training samples, never test ones."""
    config = config or TrainConfig(stage=2)
    if config.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    overlap = set(train_set.ids) & set(test_ids)
    if overlap:
        raise ValueError(f"stage-2 train and test overlap on {len(overlap)} id(s), e.g. {sorted(overlap)[0]}")
    return run_stage(model, train_set, None, config, out_dir, name="stage2", meta=meta)
