"""Seeded multi-split experiments: the fine-tuning x augmentation grid and the
stage-2 data-fraction sweep.

Every cell of a grid sees the same split for a given seed, and cells that
share a stage-1 setting share the stage-1 model.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PROFILES, Profile, model_config, stage2_aug, stage_config, sub_seed, write_echo
from .dataio import MAPS, compute_channel_stats, encode_samples, make_splits, subset_stage2
from .evalx import EvalResult, average_metrics, evaluate, write_results
from .model import build_model, load_backbone_weights
from .train import calibrate_batchnorm, train_stage1, train_stage2

log = logging.getLogger(__name__)

TABLE2_GRID = (
    ("stage1", "none"),
    ("stage1", "mixup"),
    ("stage1", "domain"),
    ("stage1", "domain+mixup"),
    ("stage1+2", "none"),
    ("stage1+2", "domain+mixup"),
)
SWEEP_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5)


def cell_id(cell) -> str:
    if isinstance(cell, str):
        return cell
    return f"{cell[0]}/{cell[1]}"


@dataclass
class SeedRun:
    seed: int
    plan: object
    results: dict[str, EvalResult] = field(default_factory=dict)
    models: dict[str, object] = field(default_factory=dict)
    test_set: object = None


@dataclass
class AblationResult:
    runs: list[SeedRun]
    cells: list[str]

    def rows(self) -> list[dict]:
        return [{"cell_id": c, "seed": r.seed, **r.results[c].metrics.row()} for c in self.cells for r in self.runs]

    def summary(self) -> list[dict]:
        return [{"cell_id": c, "seed": "mean", **average_metrics([r.results[c].metrics for r in self.runs])}
                for c in self.cells]

    def median(self, cell: str, metric: str) -> float:
        return float(np.median([getattr(r.results[cell].metrics, metric) for r in self.runs]))


def prepare_seed(bench, handheld, seed: int, profile: Profile, stats_policy: str = "stage1_train",
                 cache: dict | None = None, stage2_fraction: float = 0.5, val_fraction: float = 0.1):
    plan = make_splits(bench, handheld, stage2_fraction, sub_seed(seed, "split"), val_fraction)
    by_id = {s.id: s for s in list(bench) + list(handheld)}
    if stats_policy == "stage1_train":
        stats_src = [by_id[i] for i in plan.stage1_train]
    elif stats_policy == "all_bench":
        stats_src = list(bench)
    elif stats_policy == "union":
        stats_src = list(bench) + list(handheld)
    else:
        raise ValueError(f"unknown stats policy {stats_policy!r}")
    stats = {m: compute_channel_stats(stats_src, m) for m in MAPS}
    data = encode_samples(list(bench) + list(handheld), stats, profile.resolution, cache)
    return plan, stats, data


def fresh_model(profile: Profile, seed: int, calib=None, backbone_weights=None):
    model = build_model(model_config(profile, seed=sub_seed(seed, "init")))
    report = load_backbone_weights(model, backbone_weights)
    if report["fallback"] and calib is not None:
        calibrate_batchnorm(model, calib)
    return model


def ablation_run(
    bench,
    handheld,
    seeds,
    grid=TABLE2_GRID,
    fractions=(),
    profile: Profile | str = "ci",
    sweep_aug: str = "domain+mixup",
    out_dir: str | Path | None = None,
    backbone_weights=None,
    stats_policy: str = "stage1_train",
    keep_models: bool = False,
    stage_overrides: dict | None = None,
    stage2_fraction: float = 0.5,
    val_fraction: float = 0.1,
) -> AblationResult:
    """Run grid cells (fine-tuning, augmentation) and/or stage-2 fraction sweep cells.

    Sweep cells are named ``frac=<f>`` and use nested stage-2 training subsets
    with a fixed test half, so only the amount of stage-2 data changes.
    """
    profile = PROFILES[profile] if isinstance(profile, str) else profile
    stage_overrides = stage_overrides or {}
    grid = [tuple(c) for c in grid]
    cells = [cell_id(c) for c in grid] + [f"frac={f:g}" for f in fractions]
    if len(set(cells)) != len(cells):
        raise ValueError("duplicate cells in grid")
    stage1_augs = sorted({a for _, a in grid} | ({sweep_aug} if fractions else set()))
    cache: dict = {}
    runs = []
    for seed in seeds:
        plan, stats, data = prepare_seed(bench, handheld, seed, profile, stats_policy, cache,
                                          stage2_fraction, val_fraction)
        s1_train, s1_val = data.subset(plan.stage1_train), data.subset(plan.stage1_val)
        test = data.subset(plan.stage2_test)
        run = SeedRun(seed, plan, test_set=test)
        run_dir = Path(out_dir) / f"seed{seed}" if out_dir is not None else None
        if run_dir is not None:
            write_echo(run_dir / "splits.json", plan=plan.to_dict(), stats={m: s.to_dict() for m, s in stats.items()})

        stage1_models = {}
        for aug in stage1_augs:
            model = fresh_model(profile, seed, s1_train, backbone_weights)
            cfg = stage_config(1, profile, aug, seed=sub_seed(seed, "stage1"), **stage_overrides.get(1, {}))
            res = train_stage1(model, s1_train, s1_val, cfg)
            log.info("seed %d stage1/%s: best epoch %s, %.1fs", seed, aug, res.best_epoch, res.wall_time)
            stage1_models[aug] = model

        def record(name, model):
            r = evaluate(model, test)
            r.check_or_property()
            run.results[name] = r
            if keep_models:
                run.models[name] = model
            log.info("seed %d %s: Se %.3f Sp %.3f Acc %.3f", seed, name, r.metrics.Se, r.metrics.Sp, r.metrics.Acc)

        def stage2(aug, train_ids):
            model = copy.deepcopy(stage1_models[aug])
            cfg = stage_config(2, profile, stage2_aug(aug), seed=sub_seed(seed, "stage2"), **stage_overrides.get(2, {}))
            train_stage2(model, data.subset(train_ids), cfg, test_ids=plan.stage2_test)
            return model

        for ft, aug in grid:
            if ft == "stage1":
                record(cell_id((ft, aug)), stage1_models[aug])
            elif ft == "stage1+2":
                record(cell_id((ft, aug)), stage2(aug, plan.stage2_train))
            else:
                raise ValueError(f"unknown fine-tuning setting {ft!r}")
        for f in fractions:
            n_keep = int(round(f * (len(plan.stage2_train) + len(plan.stage2_test))))
            record(f"frac={f:g}", stage2(sweep_aug, subset_stage2(plan, handheld, n_keep)))
        runs.append(run)

    result = AblationResult(runs, cells)
    if out_dir is not None:
        write_results(result.rows(), Path(out_dir) / "results_runs.tsv")
        write_results(result.summary(), Path(out_dir) / "results.tsv")
    return result
