"""Command-line interface.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure. Data goes
to stdout (or ``--out``); diagnostics and errors go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .counters import OpCounter, plane_fit_ratio, redundancy_ratio
from .data_io import LabeledDataset, load_dataset, read_sequence, save_dataset, synthetic_dataset
from .errors import ConfigMismatchError, FormatError, InvalidArgumentError, NumericFailureError, PrenetError
from .geometry import (
    PlaneFitMode,
    VoxelMode,
    fit_plane,
    farthest_point_sample,
    knn,
    normal_parallelism,
    representation_error,
    voxel_size_for_budget,
)
from .neural import NetworkDims
from .pipeline import ModelParams, PipelineConfig, Stopwatch, classify, encode_sequence, metrics_record, predict
from .redundancy import analyze_window, partition_windows
from .training import per_class_accuracy, prepare_items, train

log = logging.getLogger("prenet")

DIAGNOSE_HEADER = ["method", "param", "mean_error", "coverage"]
BENCH_HEADER = ["K", "W", "m", "planes", "plane_fits", "m_s", "op_count", "redundancy_ratio", "fit_ratio", "wall_ms", "accuracy"]
PIPELINE_FLAGS = ("window_size", "regions", "knn", "inlier_dist", "success_frac")


class UsageError(PrenetError):
    pass


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _common(p: argparse.ArgumentParser, *, pipeline: bool = True) -> None:
    p.add_argument("--input", required=True, help="input sequence (.pcsq or PLY directory) or dataset manifest; 'synthetic' builds the default synthetic dataset (required)")
    p.add_argument("--out", default=None, help="output file (default: stdout)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default: 0)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="per-window workers (default: available cores)")
    if pipeline:
        p.add_argument("--window-size", type=int, default=None, help="redundancy window size W (default: 4, or the checkpoint's)")
        p.add_argument("--regions", type=int, default=None, help="regions per key frame m (default: 32, or the checkpoint's)")
        p.add_argument("--knn", type=int, default=None, help="neighbors per region K (default: 16, or the checkpoint's)")
        p.add_argument("--inlier-dist", type=float, default=None, help="propagation inlier distance in meters (default: 0.02)")
        p.add_argument("--success-frac", type=float, default=None, help="inlier share needed for a successful propagation (default: 0.9)")
        p.add_argument("--widths", choices=("desk", "full"), default="desk", help="network width preset (default: desk)")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default: none)")
    p.add_argument("--epochs", type=int, default=30, help="training epochs (default: 30)")
    p.add_argument("--lr", type=float, default=3e-3, help="Adam learning rate (default: 0.003)")
    p.add_argument("--batch-size", type=int, default=16, help="sequences per step (default: 16)")
    p.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic dataset when --input synthetic (default: 0)")
    p.add_argument("--per-class", type=int, default=40, help="sequences per class when --input synthetic (default: 40)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prenet", description="Plane-fit redundancy encoding for point cloud sequences.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("diagnose", help="plane-fit vs voxel representation error table")
    _common(p, pipeline=False)
    p.add_argument("--m-grid", type=_ints, default=[8, 16, 32], help="region counts for plane_fit rows (default: 8,16,32)")
    p.add_argument("--k-grid", type=_ints, default=[8, 16, 32], help="K values for plane_fit rows (default: 8,16,32)")
    p.add_argument("--voxel-grid", type=_floats, default=[0.02, 0.05, 0.1, 0.2], help="voxel sizes in meters (default: 0.02,0.05,0.1,0.2)")
    p.add_argument("--normal-k", type=int, default=10, help="neighborhood size for the normal-parallelism statistic (default: 10)")
    p.add_argument("--max-frames", type=int, default=4, help="frames averaged, evenly spaced (default: 4)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("fit", help="fit planes on every frame and print them as CSV")
    _common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("propagate", help="per-plane propagation verdicts as CSV")
    _common(p)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("encode", help="encode one sequence and print its feature as JSON")
    _common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default: random init from --seed)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="train on a dataset and write a checkpoint")
    _common(p)
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class and overall accuracy of a checkpoint")
    _common(p)
    _training_flags(p)
    p.add_argument("--split", choices=("train", "test"), default="test", help="dataset split (default: test)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="sweep K and W, report operation counts and redundancy ratios")
    _common(p)
    _training_flags(p)
    p.add_argument("--k-grid", type=_ints, default=[8, 16, 32], help="K values (default: 8,16,32)")
    p.add_argument("--w-grid", type=_ints, default=[1, 2, 4, 8], help="window sizes (default: 1,2,4,8)")
    p.add_argument("--limit", type=int, default=8, help="sequences measured per grid point (default: 8)")
    p.add_argument("--jsonl", default=None, help="also write per-run metrics records here (default: none)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("generate", help="write the synthetic action dataset (PCSQ files + manifest.csv)")
    p.add_argument("--out", required=True, help="output directory (required)")
    p.add_argument("--seed", type=int, default=0, help="dataset seed (default: 0)")
    p.add_argument("--per-class", type=int, default=40, help="sequences per class (default: 40)")
    p.add_argument("--frames", type=int, default=24, help="frames per sequence (default: 24)")
    p.add_argument("--points", type=int, default=512, help="points per frame (default: 512)")
    p.add_argument("--noise", type=float, default=0.005, help="Gaussian noise sigma in meters (default: 0.005)")
    p.set_defaults(func=cmd_generate)
    return parser


# -- helpers ------------------------------------------------------------------


def build_config(args, base: PipelineConfig | None = None, num_classes: int = 4) -> PipelineConfig:
    if base is None:
        dims = NetworkDims.full(num_classes) if getattr(args, "widths", "desk") == "full" else NetworkDims.desk(num_classes)
        base = PipelineConfig(dims=dims)
    changes = {}
    for flag, field in zip(PIPELINE_FLAGS, ("W", "m", "K", "inlier_distance", "success_fraction")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[field] = value
    return base.with_(**changes)


def check_against_checkpoint(args, ckpt: PipelineConfig) -> None:
    for flag, field in zip(PIPELINE_FLAGS, ("W", "m", "K", "inlier_distance", "success_fraction")):
        value = getattr(args, flag, None)
        if value is not None and value != getattr(ckpt, field):
            raise ConfigMismatchError(f"--{flag.replace('_', '-')} {value} does not match checkpoint {field}={getattr(ckpt, field)}")


def is_dataset(path: str) -> bool:
    p = Path(path)
    return path == "synthetic" or p.suffix == ".csv" or (p.is_dir() and (p / "manifest.csv").exists())


def load_data(args) -> LabeledDataset:
    if args.input == "synthetic":
        return synthetic_dataset(per_class=args.per_class, seed=args.data_seed)
    return load_dataset(args.input)


class _Output:
    def __init__(self, path):
        self.path = path

    def __enter__(self):
        self.fh = open(self.path, "w", newline="") if self.path else sys.stdout
        return self.fh

    def __exit__(self, *exc):
        if self.path:
            self.fh.close()
        return False


# -- subcommands ----------------------------------------------------------------


def cmd_diagnose(args) -> int:
    frames = read_sequence(args.input)
    pick = np.unique(np.linspace(0, len(frames) - 1, min(args.max_frames, len(frames))).round().astype(int))
    chosen = [frames[i].points for i in pick]

    def mean_of(mode):
        errs = [representation_error(f, mode) for f in chosen]
        return float(np.mean([e.mean_error for e in errs])), float(np.mean([e.coverage for e in errs]))

    rows = []
    for m in args.m_grid:
        for K in args.k_grid:
            if any(len(f) < max(m, K) for f in chosen):
                log.warning("skipping m=%d K=%d: frame too small", m, K)
                continue
            err, cov = mean_of(PlaneFitMode(m, K))
            rows.append(["plane_fit", f"m={m};K={K}", err, cov])
    for size in args.voxel_grid:
        err, cov = mean_of(VoxelMode(size))
        rows.append(["voxel", f"size={size}", err, cov])
    # voxel rows whose 3-value cell centers use the same budget as 6m plane values
    for m in args.m_grid:
        sizes = [voxel_size_for_budget(f, 2 * m) for f in chosen]
        errs = [representation_error(f, VoxelMode(s)) for f, s in zip(chosen, sizes)]
        rows.append(["voxel_matched", f"m={m};size={np.mean(sizes):.6g}", float(np.mean([e.mean_error for e in errs])), 1.0])
    angle = float(np.nanmean([normal_parallelism(f, args.normal_k) for f in chosen]))
    rows.append(["normal_angle_deg", f"k={args.normal_k}", angle, 1.0])

    with _Output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAGNOSE_HEADER)
        for method, param, err, cov in rows:
            w.writerow([method, param, f"{err:.9g}", f"{cov:.6f}"])
    return 0


def cmd_fit(args) -> int:
    frames = read_sequence(args.input)
    cfg = build_config(args)
    with _Output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "region", "pivot", "a", "b", "c", "cx", "cy", "cz", "mean_distance"])
        for fi, frame in enumerate(frames):
            pts = frame.points
            if len(pts) < max(cfg.m, cfg.K):
                raise InvalidArgumentError(f"frame {fi} has {len(pts)} points, needs max(m, K) = {max(cfg.m, cfg.K)}")
            for r, ci in enumerate(farthest_point_sample(pts, cfg.m)):
                members = knn(pts, pts[ci], cfg.K)
                try:
                    plane = fit_plane(pts[members], center=pts[ci])
                except PrenetError:
                    w.writerow([fi, r, "degenerate", "", "", "", *pts[ci], ""])
                    continue
                dist = float(plane.distances(pts[members]).mean())
                w.writerow([fi, r, plane.pivot_axis.name, f"{plane.a:.9g}", f"{plane.b:.9g}", f"{plane.c:.9g}", *(f"{v:.9g}" for v in plane.center), f"{dist:.9g}"])
    return 0


def cmd_propagate(args) -> int:
    frames = read_sequence(args.input)
    cfg = build_config(args)
    with _Output(args.out) as fh:
        header_done = False
        for window in partition_windows(frames, cfg.W):
            report = analyze_window(window, cfg.propagation)
            text = report.to_csv()
            if header_done:
                text = text.split("\n", 1)[1]
            fh.write(text)
            header_done = True
            log.info("window %d: %d planes, m_s=%d", window.window_index, report.n_planes, report.m_s)
    return 0


def cmd_encode(args) -> int:
    frames = read_sequence(args.input)
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
        check_against_checkpoint(args, params.config)
        cfg = params.config
    else:
        cfg = build_config(args)
        params = ModelParams.initialize(cfg, args.seed)
    with Stopwatch() as sw:
        enc = encode_sequence(frames, params, cfg, threads=args.threads)
    probs = classify(enc.feature, params)
    extra = {"feature": [float(v) for v in enc.feature], "probabilities": [float(v) for v in probs]}
    with _Output(args.out) as fh:
        fh.write(metrics_record(cfg, enc, sw.ms, **extra) + "\n")
    return 0


def cmd_train(args) -> int:
    ds = load_data(args)
    cfg = build_config(args, num_classes=ds.num_classes)
    train_items, test_items = ds.split("train"), ds.split("test")
    if not train_items:
        raise InvalidArgumentError("dataset has an empty train split")
    params = ModelParams.initialize(cfg, args.seed)
    out = Path(args.checkpoint or args.out or "prenet.ckpt")
    log.info("preparing %d train / %d test sequences", len(train_items), len(test_items))
    train_inputs = prepare_items(train_items, cfg, args.threads)
    test_inputs = prepare_items(test_items, cfg, args.threads)

    def emit(entry):
        print(entry.to_json(), flush=True)

    result = train(
        params,
        train_inputs,
        [it.label for it in train_items],
        args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        test_inputs=test_inputs,
        test_labels=[it.label for it in test_items],
        on_epoch=emit,
    )
    save_checkpoint(result.params, out)
    if result.failed:
        print(f"prenet: numeric failure ({result.error}); kept last good epoch in {out}", file=sys.stderr)
        return 3
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    params = load_checkpoint(args.checkpoint)
    check_against_checkpoint(args, params.config)
    ds = load_data(args)
    if ds.num_classes > params.config.num_classes:
        raise ConfigMismatchError(f"dataset has {ds.num_classes} classes, checkpoint {params.config.num_classes}")
    items = ds.split(args.split)
    if not items:
        raise InvalidArgumentError(f"the {args.split} split is empty")
    inputs = prepare_items(items, params.config, args.threads)
    labels = np.array([it.label for it in items])
    per_class = per_class_accuracy(params, inputs, labels, params.config.num_classes)
    overall = float(np.mean(predict(params, inputs).argmax(axis=1) == labels))
    with _Output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "count", "accuracy"])
        for c, acc in per_class.items():
            count = int((labels == c).sum())
            w.writerow([c, count, "" if math.isnan(acc) else f"{acc:.6f}"])
        w.writerow(["overall", len(labels), f"{overall:.6f}"])
    return 0


def bench_rows(sequences, K_grid, W_grid, m, params: ModelParams, labels=None, jsonl=None, threads: int = 1):
    """Rows of the K/W sweep; ``m=None`` picks ceil(points / K) regions."""
    rows = []
    for K in K_grid:
        m_K = m if m is not None else max(1, math.ceil(min(len(s[0].points) for s in sequences) / K))
        base_cfg = params.config.with_(K=K, m=m_K, W=1)
        baseline = OpCounter()
        for seq in sequences:
            encode_sequence(seq, params, base_cfg, baseline, threads=threads)
        for W in W_grid:
            cfg = base_cfg.with_(W=W)
            counter = OpCounter()
            planes = m_s = 0
            with Stopwatch() as sw:
                feats = []
                for seq in sequences:
                    enc = encode_sequence(seq, params, cfg, counter, threads=threads)
                    planes += enc.planes_total
                    m_s += enc.m_s_total
                    feats.append(enc.feature)
                    if jsonl is not None:
                        jsonl.write(metrics_record(cfg, enc, 0.0) + "\n")
            acc = ""
            if labels is not None:
                pred = classify(np.stack(feats), params).argmax(axis=1)
                acc = f"{float(np.mean(pred == np.asarray(labels))):.6f}"
            rows.append(
                {
                    "K": K,
                    "W": W,
                    "m": m_K,
                    "planes": planes,
                    "plane_fits": counter.plane_fits,
                    "m_s": m_s,
                    "op_count": counter.weighted_total(),
                    "redundancy_ratio": redundancy_ratio(counter, baseline),
                    "fit_ratio": plane_fit_ratio(counter, baseline),
                    "wall_ms": sw.ms,
                    "accuracy": acc,
                }
            )
    return rows


def cmd_bench(args) -> int:
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
    else:
        params = ModelParams.initialize(build_config(args), args.seed)
    params = ModelParams(build_config(args, params.config), params.tensors, params.seed)
    if not is_dataset(args.input):
        sequences, labels = [read_sequence(args.input)], None
    else:
        ds = load_data(args)
        items = (ds.split("test") or ds.items)[: args.limit]
        if not items:
            raise InvalidArgumentError("dataset is empty")
        sequences = [it.load() for it in items]
        labels = [it.label for it in items] if args.checkpoint else None
    jsonl = open(args.jsonl, "w") if args.jsonl else None
    try:
        rows = bench_rows(sequences, args.k_grid, args.w_grid, args.regions, params, labels, jsonl, args.threads)
    finally:
        if jsonl is not None:
            jsonl.close()
    with _Output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_HEADER)
        for r in rows:
            w.writerow([r["K"], r["W"], r["m"], r["planes"], r["plane_fits"], r["m_s"], r["op_count"], f"{r['redundancy_ratio']:.6f}", f"{r['fit_ratio']:.6f}", f"{r['wall_ms']:.3f}", r["accuracy"]])
    return 0


def cmd_generate(args) -> int:
    ds = synthetic_dataset(per_class=args.per_class, seed=args.seed, frames=args.frames, points=args.points, noise=args.noise)
    manifest = save_dataset(ds, args.out)
    print(str(manifest))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except BrokenPipeError:
        # downstream reader closed early (e.g. piped into head)
        sys.stderr.close()
        return 0
    except NumericFailureError as exc:
        print(f"prenet: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (UsageError, InvalidArgumentError, FormatError, ConfigMismatchError, OSError) as exc:
        print(f"prenet: error: {exc}", file=sys.stderr)
        return 2
    except PrenetError as exc:
        print(f"prenet: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
