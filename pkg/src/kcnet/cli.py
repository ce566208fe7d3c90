"""``kcnet`` command line: generate, stats, train, eval, predict, ablate,
export-features and baseline.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Relative ``--out``
paths are resolved under ``$KCNET_OUTPUT_ROOT`` when it is set. Every
subcommand writes ``resolved_config.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .ablation import SWEEP_FRACTIONS, TABLE2_GRID, ablation_run
from .config import (
    PROFILES,
    model_config,
    read_config,
    stage_aug,
    stage_config,
    stage_overrides,
    sub_seed,
    write_echo,
)
from .dataio import (
    MAPS,
    ChannelStats,
    compute_channel_stats,
    encode_samples,
    read_manifest,
    stratified_split,
    validate_samples,
)
from .evalx import (
    Metrics,
    evaluate,
    export_features,
    head_predictions,
    or_rule,
    ppk_baseline,
    simk_matrix,
    svm_predict,
    svm_train,
    write_predictions,
    write_results,
)
from .model import build_model, load_backbone_weights, load_checkpoint
from .synthcornea import PROFILES as CAPTURE_PROFILES
from .synthcornea import default_workers, generate_dataset
from .train import calibrate_batchnorm, train_stage1, train_stage2

OUTPUT_ROOT_ENV = "KCNET_OUTPUT_ROOT"
CONFIG_NAME = "resolved_config.json"


class UsageError(Exception):
    pass


def out_path(p: str | Path) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def _fracs(s: str) -> list[float]:
    try:
        vals = [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {s!r}") from None
    if not vals or not all(0 < v < 1 for v in vals):
        raise argparse.ArgumentTypeError("fractions must lie in (0, 1)")
    return vals


def _positive(s: str) -> int:
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {s}")
    return v


class Run:
    """Resolved settings shared by every subcommand (CLI > config file > profile)."""

    def __init__(self, args):
        self.args = args
        self.cp = read_config(args.config)
        run = self.cp["run"] if self.cp.has_section("run") else {}
        name = "desk" if args.desk else args.scale or run.get("profile", "full")
        if name not in PROFILES:
            raise UsageError(f"unknown profile {name!r}")
        self.profile = PROFILES[name]
        self.seed = args.seed if args.seed is not None else int(run.get("seed", 0))
        det = args.deterministic
        self.deterministic = det if det is not None else self.cp.getboolean("run", "deterministic", fallback=True)
        self.backbone_weights = getattr(args, "backbone_weights", None) or run.get("backbone_weights")
        data = self.cp["data"] if self.cp.has_section("data") else {}
        self.stats_policy = data.get("stats_policy", "stage1_train")
        self.val_fraction = float(data.get("val_fraction", 0.1))
        self.stage2_fraction = float(data.get("stage2_fraction", 0.5))
        self.model_overrides = {}
        if self.cp.has_section("model"):
            m = self.cp["model"]
            for key, conv in (("resolution", int), ("width", int), ("n_stages", int), ("dropout_p", float)):
                if key in m:
                    self.model_overrides[key] = conv(m[key])
        torch.use_deterministic_algorithms(self.deterministic)

    def train_config(self, stage: int, epochs: int | None = None, aug: str | None = None):
        ov = stage_overrides(self.cp, stage)
        if epochs is not None:
            ov["epochs"] = epochs
        aug = aug or stage_aug(self.cp, stage)
        return stage_config(stage, self.profile, aug, seed=sub_seed(self.seed, f"stage{stage}"),
                            deterministic=self.deterministic, **ov)

    def echo(self, out_dir: Path, **extra) -> Path:
        args = {k: v for k, v in vars(self.args).items() if k != "func"}
        return write_echo(out_dir / CONFIG_NAME, args=args, profile=self.profile, seed=self.seed,
                          deterministic=self.deterministic, model_overrides=self.model_overrides, **extra)


def _load_samples(path):
    samples = read_manifest(path)
    validate_samples(samples)
    if not samples:
        raise ValueError(f"manifest {path} has no samples")
    return samples


def _stats_from_meta(meta: dict, path) -> dict[str, ChannelStats]:
    if "stats" not in meta:
        raise ValueError(f"checkpoint {path} carries no normalization statistics")
    return {m: ChannelStats.from_dict(d) for m, d in meta["stats"].items()}


# -- subcommands ---------------------------------------------------------------

def cmd_generate(run: Run, args) -> int:
    if args.normal < 0 or args.kc < 0 or args.normal + args.kc == 0:
        raise UsageError("--normal and --kc must be non-negative with a positive total")
    out = out_path(args.out)
    resolution = args.resolution or run.profile.render_resolution
    samples = generate_dataset(args.normal, args.kc, args.profile, out, run.seed, resolution=resolution,
                               workers=args.workers or default_workers())
    run.echo(out, resolution=resolution, n_samples=len(samples))
    print(f"wrote {len(samples)} samples to {out / 'manifest.tsv'}")
    return 0


def cmd_stats(run: Run, args) -> int:
    samples = _load_samples(args.manifest)
    stats = {m: compute_channel_stats(samples, m).to_dict() for m in MAPS}
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    run.echo(out)
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_train(run: Run, args) -> int:
    out = out_path(args.out)
    samples = _load_samples(args.manifest)
    if args.stage == 1:
        rng = np.random.default_rng(sub_seed(run.seed, "split"))
        train_ids, val_ids = stratified_split(samples, 1 - run.val_fraction, rng)
        by_id = {s.id: s for s in samples}
        stats_src = [by_id[i] for i in train_ids] if run.stats_policy == "stage1_train" else samples
        stats = {m: compute_channel_stats(stats_src, m) for m in MAPS}
        data = encode_samples(samples, stats, run.model_overrides.get("resolution", run.profile.resolution))
        train_set, val_set = data.subset(train_ids), data.subset(val_ids)
        model = build_model(model_config(run.profile, seed=sub_seed(run.seed, "init"), **run.model_overrides))
        if load_backbone_weights(model, run.backbone_weights)["fallback"]:
            calibrate_batchnorm(model, train_set)
        cfg = run.train_config(1, args.epochs, args.aug)
        splits = {"train": train_ids, "val": val_ids}
        meta = {"stats": {m: s.to_dict() for m, s in stats.items()}, "splits": splits, "seed": run.seed}
        res = train_stage1(model, train_set, val_set, cfg, out_dir=out, meta=meta)
    else:
        if not args.from_checkpoint:
            raise UsageError("--stage 2 requires --from-checkpoint")
        model, prev = load_checkpoint(args.from_checkpoint)
        stats = _stats_from_meta(prev, args.from_checkpoint)
        rng = np.random.default_rng(sub_seed(run.seed, "split2"))
        train_ids, test_ids = stratified_split(samples, args.fraction, rng)
        data = encode_samples(samples, stats, model.config.resolution)
        cfg = run.train_config(2, args.epochs, args.aug)
        splits = {"train": train_ids, "test": test_ids}
        meta = {"stats": prev["stats"], "splits": splits, "test_ids": test_ids, "seed": run.seed,
                "parent": str(args.from_checkpoint)}
        res = train_stage2(model, data.subset(train_ids), cfg, test_ids=test_ids, out_dir=out, meta=meta)
    write_echo(out / f"stage{args.stage}_splits.json", **splits)
    summary = res.summary()
    wall = summary.pop("wall_time")  # kept out of the file so reruns are byte-identical
    summary["checkpoint"] = res.checkpoint.name
    write_echo(out / f"stage{args.stage}_result.json", **summary)
    run.echo(out, train_config=cfg.echo())
    print(f"stage {args.stage}: {len(res.loss_trace)} epoch(s) in {wall:.1f}s, checkpoint {res.checkpoint}")
    return 0


def _eval_set(args, model, meta):
    samples = _load_samples(args.manifest)
    stats = _stats_from_meta(meta, args.checkpoint)
    split = args.split
    if split == "auto":
        split = "test" if meta.get("test_ids") else "all"
    if split == "test":
        if not meta.get("test_ids"):
            raise UsageError("--split test needs a stage-2 checkpoint with recorded test ids")
        keep = set(meta["test_ids"])
        samples = [s for s in samples if s.id in keep]
        if not samples:
            raise ValueError(f"none of the checkpoint's test ids occur in {args.manifest}")
    return encode_samples(samples, stats, model.config.resolution), split


def cmd_eval(run: Run, args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    data, split = _eval_set(args, model, meta)
    res = evaluate(model, data)
    res.check_or_property()
    out = out_path(args.out)
    rows = [{"cell_id": name, "seed": run.seed, **m.row()}
            for name, m in (("final", res.metrics), *(("head_" + k, v) for k, v in res.head_metrics.items()))]
    write_results(rows, out / "results.tsv")
    write_predictions(res.predictions, out / "predictions.tsv")
    run.echo(out, split=split, n_samples=len(data))
    m = res.metrics
    print(f"Se={m.Se:.4f} Sp={m.Sp:.4f} Acc={m.Acc:.4f} (P_k={m.P_k}/{m.N_k}, P_n={m.P_n}/{m.N_n})")
    return 0


def cmd_predict(run: Run, args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    samples = _load_samples(args.manifest)
    if args.id:
        wanted = set(args.id)
        samples = [s for s in samples if s.id in wanted]
        missing = wanted - {s.id for s in samples}
        if missing:
            raise ValueError(f"id(s) not in {args.manifest}: {sorted(missing)}")
    data = encode_samples(samples, _stats_from_meta(meta, args.checkpoint), model.config.resolution)
    pa, pt = head_predictions(model, data)
    final = or_rule(pa, pt)
    labels = ("normal", "keratoconus")
    print("id\tpred_axial\tpred_tangential\tpred_final")
    for sid, a, t, f in zip(data.ids, pa, pt, final):
        print(f"{sid}\t{labels[a]}\t{labels[t]}\t{labels[f]}")
    run.echo(out_path(args.out))
    return 0


def cmd_ablate(run: Run, args) -> int:
    bench, hand = _load_samples(args.bench), _load_samples(args.handheld)
    grid = TABLE2_GRID if args.grid == "table2" or (args.grid is None and not args.sweep) else ()
    fracs = (args.fracs or list(SWEEP_FRACTIONS)) if args.sweep else ()
    overrides = {s: stage_overrides(run.cp, s) for s in (1, 2)}
    for s, e in ((1, args.epochs1), (2, args.epochs2)):
        if e is not None:
            overrides[s]["epochs"] = e
        overrides[s]["deterministic"] = run.deterministic
    seeds = [run.seed + i for i in range(args.seeds)]
    out = out_path(args.out)
    res = ablation_run(bench, hand, seeds, grid, fracs, run.profile, out_dir=out,
                       backbone_weights=run.backbone_weights, stats_policy=run.stats_policy,
                       stage_overrides=overrides, stage2_fraction=run.stage2_fraction,
                       val_fraction=run.val_fraction)
    run.echo(out, seeds=seeds, cells=res.cells, stage_overrides=overrides)
    for row in res.summary():
        print(f"{row['cell_id']}\tSe={row['Se']:.4f}\tSp={row['Sp']:.4f}\tAcc={row['Acc']:.4f}")
    return 0


def cmd_export_features(run: Run, args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    data, split = _eval_set(args, model, meta)
    out = out_path(args.out)
    feats = export_features(model, data, args.head, out / f"features_{args.head}.tsv")
    run.echo(out, split=split, n_samples=len(data))
    print(f"wrote {feats.shape[0]}x{feats.shape[1]} features to {out / f'features_{args.head}.tsv'}")
    return 0


def cmd_baseline(run: Run, args) -> int:
    test = _load_samples(args.test_manifest)
    if args.method == "ppk":
        m = ppk_baseline(test, suspect_as=args.suspect_as)
    else:
        if not args.train_manifest:
            raise UsageError("--method svm requires --train-manifest")
        train = _load_samples(args.train_manifest)
        svm = svm_train(simk_matrix(train), [s.label for s in train])
        m = Metrics.from_predictions([s.label for s in test], svm_predict(svm, simk_matrix(test)))
    out = out_path(args.out)
    write_results([{"cell_id": f"baseline-{args.method}", "seed": run.seed, **m.row()}], out / "results.tsv")
    run.echo(out)
    print(f"{args.method}: Se={m.Se:.4f} Sp={m.Sp:.4f} Acc={m.Acc:.4f}")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [run] [data] [model] [stage1] [stage2] sections")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="deterministic torch kernels (default on)")
    common.add_argument("--scale", choices=sorted(PROFILES), help="run profile (default full)")
    common.add_argument("--desk", action="store_true", help="shorthand for --scale desk")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="kcnet", description="Keratoconus screening on corneal topography heatmaps.")
    p.add_argument("--version", action="version", version=f"kcnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="render a synthetic topography dataset")
    g.add_argument("--profile", choices=sorted(CAPTURE_PROFILES), required=True, help="capture profile")
    g.add_argument("--normal", type=_positive, required=True)
    g.add_argument("--kc", type=_positive, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--resolution", type=int, help="image side in pixels (default from --scale)")
    g.add_argument("--workers", type=int, help="worker processes (default: CPU count)")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("stats", parents=[common], help="per-channel mean/std of a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stats)

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--manifest", required=True, help="bench manifest (stage 1) or handheld manifest (stage 2)")
    t.add_argument("--from-checkpoint", help="stage-1 checkpoint to fine-tune (stage 2)")
    t.add_argument("--epochs", type=_positive)
    t.add_argument("--fraction", type=float, default=0.5, help="stage-2 training fraction of the manifest")
    t.add_argument("--aug", choices=("none", "mixup", "domain", "domain+mixup"))
    t.add_argument("--backbone-weights", help="backbone state dict; random init if absent")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "Se/Sp/Acc of a checkpoint"),
                                 ("export-features", cmd_export_features, "dump FC2 activations")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--manifest", required=True)
        e.add_argument("--split", choices=("auto", "all", "test"), default="auto",
                       help="auto: the checkpoint's stage-2 test ids if recorded, else all samples")
        e.add_argument("--out", required=True)
        if name == "export-features":
            e.add_argument("--head", choices=("axial", "tangential"), default="tangential")
        e.set_defaults(func=func)

    pr = sub.add_parser("predict", parents=[common], help="per-sample head and OR-rule predictions")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--manifest", required=True)
    pr.add_argument("--id", action="append", help="restrict to these sample ids (repeatable)")
    pr.add_argument("--out", default=".", help="where to write the config echo")
    pr.set_defaults(func=cmd_predict)

    a = sub.add_parser("ablate", parents=[common], help="seeded fine-tuning/augmentation grid and sweeps")
    a.add_argument("--bench", required=True)
    a.add_argument("--handheld", required=True)
    a.add_argument("--grid", choices=("table2",))
    a.add_argument("--sweep", choices=("stage2-fraction",))
    a.add_argument("--fracs", type=_fracs)
    a.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed")
    a.add_argument("--epochs1", type=_positive)
    a.add_argument("--epochs2", type=_positive)
    a.add_argument("--backbone-weights")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("baseline", parents=[common], help="sim-K SVM or PPK threshold baseline")
    b.add_argument("--method", choices=("svm", "ppk"), required=True)
    b.add_argument("--train-manifest")
    b.add_argument("--test-manifest", required=True)
    b.add_argument("--suspect-as", choices=("keratoconus", "normal"), default="keratoconus")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_baseline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args)
        return args.func(run, args)
    except UsageError as e:
        parser.error(str(e))
    except (OSError, ValueError, KeyError, RuntimeError) as e:
        print(f"kcnet: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
