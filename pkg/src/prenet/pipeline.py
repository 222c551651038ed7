"""End-to-end sequence encoding: per-window branches, fusion, aggregation.

Windows are independent until the cross-window aggregation, so the
geometric analysis and window encoders run on a thread pool and are reduced
serially in window order. Results do not depend on the worker count.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from .counters import OpCounter
from .errors import InvalidArgumentError
from .geometry import PointCloudFrame
from .neural import NetworkDims, Params, PrenetModel, SequenceInputs, WindowInputs, softmax
from .redundancy import PropagationConfig, PropagationReport, RedundancyWindow, analyze_window, partition_windows

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PipelineConfig:
    W: int = 4
    m: int = 32
    K: int = 16
    inlier_distance: float = 0.02
    success_fraction: float = 0.9
    dims: NetworkDims = field(default_factory=NetworkDims.desk)

    def __post_init__(self):
        if self.W < 1:
            raise InvalidArgumentError(f"W must be >= 1, got {self.W}")
        self.propagation  # validates m, K and thresholds

    @property
    def propagation(self) -> PropagationConfig:
        return PropagationConfig(self.m, self.K, self.inlier_distance, self.success_fraction)

    @property
    def num_classes(self) -> int:
        return self.dims.num_classes

    def to_dict(self) -> dict:
        return {
            "W": self.W,
            "m": self.m,
            "K": self.K,
            "inlier_distance": self.inlier_distance,
            "success_fraction": self.success_fraction,
            "dims": self.dims.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        dims = NetworkDims.from_dict(d.pop("dims"))
        return cls(dims=dims, **d)

    def with_(self, **changes) -> "PipelineConfig":
        return replace(self, **changes)


@dataclass
class ModelParams:
    config: PipelineConfig
    tensors: Params
    seed: int = 0
    version: int = CHECKPOINT_VERSION

    @classmethod
    def initialize(cls, config: PipelineConfig, seed: int = 0) -> "ModelParams":
        model = PrenetModel(config.dims)
        return cls(config, model.init_params(seed), seed)

    @cached_property
    def model(self) -> PrenetModel:
        return PrenetModel(self.config.dims)

    def check(self, cfg: PipelineConfig | None = None) -> None:
        if cfg is not None and cfg.dims != self.config.dims:
            raise InvalidArgumentError("pipeline widths do not match the parameters")
        self.model.check_params(self.tensors)

    @property
    def n_params(self) -> int:
        return self.model.n_params


@dataclass
class WindowFeatures:
    tc: np.ndarray
    td: np.ndarray
    tr: np.ndarray
    fused: np.ndarray


@dataclass
class PreparedWindow:
    window: RedundancyWindow
    report: PropagationReport
    inputs: WindowInputs
    counter: OpCounter


@dataclass
class SequenceEncoding:
    windows: list[WindowFeatures]
    reports: list[PropagationReport]
    feature: np.ndarray
    window_counters: list[OpCounter]
    aggregate_counter: OpCounter

    @property
    def counter(self) -> OpCounter:
        total = OpCounter()
        for c in self.window_counters:
            total.merge(c)
        return total.merge(self.aggregate_counter)

    @property
    def m_s_total(self) -> int:
        return sum(r.m_s for r in self.reports)

    @property
    def planes_total(self) -> int:
        return sum(r.n_planes for r in self.reports)


def window_inputs(window: RedundancyWindow, report: PropagationReport) -> WindowInputs:
    """Route every plane and residual point of a window to its branch.

    Window-wide successful planes go to the consistency branch once, at the
    key-frame time. Every other plane contributes one item per frame (its
    refit where it failed, the key plane where it held) to the difference
    branch. Uncovered points form the residual branch, grouped by frame.
    """
    rel = window.relative_times()
    ws = report.window_successful
    tc = [report.planes[j].as_vector() for j in range(report.n_planes) if ws[j]]
    tc_times = [rel[window.key_index]] * len(tc)
    td, td_times = [], []
    for j in range(report.n_planes):
        if ws[j]:
            continue
        for f in range(len(window)):
            plane = report.frame_plane(j, f)
            if plane is not None:
                td.append(plane.as_vector())
                td_times.append(rel[f])
    residual = [window.frames[f].points[idx] for f, idx in enumerate(report.residual_indices)]
    return WindowInputs(
        tc_planes=np.array(tc, dtype=np.float64).reshape(-1, 6),
        tc_times=np.array(tc_times, dtype=np.float64),
        td_planes=np.array(td, dtype=np.float64).reshape(-1, 6),
        td_times=np.array(td_times, dtype=np.float64),
        residual_points=np.concatenate(residual).astype(np.float64).reshape(-1, 3),
        residual_counts=np.array([len(r) for r in residual], dtype=np.int64),
        frame_times=rel,
    )


def prepare_window(window: RedundancyWindow, cfg: PipelineConfig) -> PreparedWindow:
    counter = OpCounter()
    report = analyze_window(window, cfg.propagation, counter)
    return PreparedWindow(window, report, window_inputs(window, report), counter)


def window_times(sequence: Sequence[PointCloudFrame], windows: Sequence[RedundancyWindow]) -> np.ndarray:
    """Key-frame times relative to the sequence midpoint, scaled into [-1, 1]."""
    stamps = [f.timestamp for f in sequence]
    t0, t1 = min(stamps), max(stamps)
    mid, half = 0.5 * (t0 + t1), 0.5 * (t1 - t0)
    keys = np.array([w.key_frame.timestamp for w in windows], dtype=np.float64) - mid
    return keys / half if half > 0 else keys


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def prepare_sequence(
    sequence: Sequence[PointCloudFrame], cfg: PipelineConfig, threads: int = 1
) -> tuple[SequenceInputs, list[PreparedWindow]]:
    """Geometric analysis of a whole sequence; independent of the parameters."""
    if len(sequence) < 1:
        raise InvalidArgumentError("sequence must contain at least one frame")
    windows = partition_windows(sequence, cfg.W)
    prepared = _map(lambda w: prepare_window(w, cfg), windows, threads)
    inputs = SequenceInputs([p.inputs for p in prepared], window_times(sequence, windows))
    return inputs, prepared


def _features(fused: np.ndarray, dims: NetworkDims) -> WindowFeatures:
    pw = dims.plane_width
    return WindowFeatures(fused[:pw].copy(), fused[pw : 2 * pw].copy(), fused[2 * pw :].copy(), fused.copy())


def encode_window(
    window: RedundancyWindow, params: ModelParams, cfg: PipelineConfig | None = None, counter: OpCounter | None = None
) -> WindowFeatures:
    """Consistency, difference and residual features of one window, fused."""
    cfg = cfg or params.config
    params.check(cfg)
    local = OpCounter()
    report = analyze_window(window, cfg.propagation, local)
    fused, _ = params.model.encode_windows(params.tensors, [window_inputs(window, report)], local)
    if counter is not None:
        counter.merge(local)
    return _features(fused[0], cfg.dims)


def encode_sequence(
    sequence: Sequence[PointCloudFrame],
    params: ModelParams,
    cfg: PipelineConfig | None = None,
    counter: OpCounter | None = None,
    threads: int = 1,
) -> SequenceEncoding:
    """Encode windows independently, then aggregate them in window order."""
    cfg = cfg or params.config
    params.check(cfg)
    model = params.model
    windows = partition_windows(sequence, cfg.W)

    def run(window: RedundancyWindow):
        prep = prepare_window(window, cfg)
        fused, _ = model.encode_windows(params.tensors, [prep.inputs], prep.counter)
        return prep, fused[0]

    results = _map(run, windows, threads)
    fused = np.stack([f for _, f in results])
    agg = OpCounter()
    feats, _ = model.aggregate(params.tensors, fused, window_times(sequence, windows), np.array([len(windows)]), agg)
    enc = SequenceEncoding(
        windows=[_features(f, cfg.dims) for _, f in results],
        reports=[p.report for p, _ in results],
        feature=feats[0],
        window_counters=[p.counter for p, _ in results],
        aggregate_counter=agg,
    )
    if counter is not None:
        counter.merge(enc.counter)
    return enc


def classify(feature: np.ndarray, params: ModelParams, counter: OpCounter | None = None) -> np.ndarray:
    """Class probabilities from a pooled sequence feature."""
    logits = params.model.logits(params.tensors, feature, counter)
    probs = softmax(logits)
    return probs[0] if np.ndim(feature) == 1 else probs


def predict(params: ModelParams, inputs: Sequence[SequenceInputs], batch_size: int = 32) -> np.ndarray:
    out = []
    for i in range(0, len(inputs), batch_size):
        logits, _ = params.model.forward(params.tensors, inputs[i : i + batch_size])
        out.append(softmax(logits))
    return np.concatenate(out) if out else np.zeros((0, params.config.num_classes))


def count_ops(sequence: Sequence[PointCloudFrame], cfg: PipelineConfig, params: ModelParams | None = None) -> OpCounter:
    """Operations of a full encode, counted without needing trained weights."""
    params = params or ModelParams.initialize(cfg, 0)
    counter = OpCounter()
    encode_sequence(sequence, params, cfg, counter)
    return counter


def metrics_record(cfg: PipelineConfig, enc: SequenceEncoding, wall_ms: float, **extra) -> str:
    """One JSON line describing a run."""
    rec = {
        "config": cfg.to_dict(),
        "windows": len(enc.reports),
        "planes": enc.planes_total,
        "m_s": enc.m_s_total,
        "branch_widths": {"tc": cfg.dims.plane_width, "td": cfg.dims.plane_width, "tr": cfg.dims.residual_width},
        "ops": enc.counter.as_dict(),
        "wall_ms": round(wall_ms, 3),
    }
    rec.update(extra)
    return json.dumps(rec, sort_keys=True)


class Stopwatch:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.ms = (time.perf_counter() - self.start) * 1000.0
        return False
