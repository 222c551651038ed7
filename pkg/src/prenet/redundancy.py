"""Redundancy windows, key-frame plane fitting and plane propagation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .counters import OpCounter
from .errors import DegenerateGeometryError, InvalidArgumentError
from .geometry import FittedPlane, LocalRegion, PointCloudFrame, farthest_point_sample, fit_plane, knn


@dataclass
class RedundancyWindow:
    frames: list[PointCloudFrame]
    window_index: int = 0
    key_index: int = 0
    start_frame: int = 0

    def __post_init__(self):
        if not self.frames:
            raise InvalidArgumentError("a window needs at least one frame")
        if not 0 <= self.key_index < len(self.frames):
            raise InvalidArgumentError(f"key_index {self.key_index} outside window of {len(self.frames)}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def key_frame(self) -> PointCloudFrame:
        return self.frames[self.key_index]

    def relative_times(self) -> np.ndarray:
        """Frame times relative to the key frame, scaled into [-1, 1]."""
        t = np.array([f.timestamp for f in self.frames], dtype=np.float64)
        rel = t - t[self.key_index]
        span = np.abs(rel).max()
        return rel / span if span > 0 else rel


@dataclass(frozen=True)
class PropagationConfig:
    m: int = 32
    K: int = 16
    inlier_distance: float = 0.02
    success_fraction: float = 0.9

    def __post_init__(self):
        if self.m < 1:
            raise InvalidArgumentError(f"m must be >= 1, got {self.m}")
        if self.K < 3:
            raise InvalidArgumentError(f"K must be >= 3, got {self.K}")
        if not self.inlier_distance > 0:
            raise InvalidArgumentError(f"inlier_distance must be positive, got {self.inlier_distance}")
        if not 0 < self.success_fraction <= 1:
            raise InvalidArgumentError(f"success_fraction must be in (0, 1], got {self.success_fraction}")


@dataclass
class PropagationReport:
    """Per-plane, per-frame propagation verdicts for one window.

    ``success`` and ``inlier_fraction`` have shape (n_planes, n_frames); the
    key-frame column is always successful. ``refits`` maps (plane, frame) of
    every failure to the plane refitted on the tracked region, or None when
    that region is degenerate.
    """

    window_index: int
    key_index: int
    planes: list[FittedPlane]
    tracked: list[list[LocalRegion]]
    inlier_fraction: np.ndarray
    success: np.ndarray
    refits: dict[tuple[int, int], FittedPlane | None]
    residual_indices: list[np.ndarray]

    @property
    def n_planes(self) -> int:
        return len(self.planes)

    @property
    def n_frames(self) -> int:
        return len(self.residual_indices)

    @property
    def window_successful(self) -> np.ndarray:
        """Mask of planes successful in every frame of the window."""
        if self.n_planes == 0:
            return np.zeros(0, dtype=bool)
        return self.success.all(axis=1)

    @property
    def m_s(self) -> int:
        return int(self.window_successful.sum())

    def frame_plane(self, j: int, f: int) -> FittedPlane | None:
        """Plane representing region j in frame f: the key plane or its refit."""
        if self.success[j, f]:
            return self.planes[j]
        return self.refits.get((j, f))

    def covered_indices(self, f: int) -> np.ndarray:
        parts = [self.tracked[j][f].member_indices for j in range(self.n_planes) if self.frame_plane(j, f) is not None]
        if not parts:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(parts))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["window", "plane", "frame", "verdict", "inlier_fraction", "window_successful"])
        ws = self.window_successful
        for j in range(self.n_planes):
            for f in range(self.n_frames):
                verdict = "key" if f == self.key_index else ("success" if self.success[j, f] else "failure")
                writer.writerow([self.window_index, j, f, verdict, f"{self.inlier_fraction[j, f]:.6f}", int(ws[j])])
        return buf.getvalue()


def partition_windows(sequence: Sequence[PointCloudFrame], W: int) -> list[RedundancyWindow]:
    """Consecutive non-overlapping windows of W frames; the last may be shorter.

    Frames are ordered by timestamp first (stable for equal times).
    """
    if W < 1:
        raise InvalidArgumentError(f"window size must be >= 1, got {W}")
    if len(sequence) == 0:
        raise InvalidArgumentError("sequence is empty")
    sequence = sorted(sequence, key=lambda f: f.timestamp)
    windows = []
    for w, start in enumerate(range(0, len(sequence), W)):
        frames = list(sequence[start : start + W])
        windows.append(RedundancyWindow(frames, w, len(frames) // 2, start))
    return windows


def build_key_regions(
    window: RedundancyWindow, cfg: PropagationConfig, counter: OpCounter | None = None
) -> tuple[list[LocalRegion], list[FittedPlane]]:
    """FPS + KNN regions on the key frame and one fitted plane per region.

    Regions whose fit is degenerate are dropped; their members end up in the
    residual set.
    """
    pts = window.key_frame.points
    n = len(pts)
    if n < max(cfg.m, cfg.K):
        raise InvalidArgumentError(f"key frame has {n} points, needs at least max(m, K) = {max(cfg.m, cfg.K)}")
    centers = farthest_point_sample(pts, cfg.m)
    if counter is not None:
        counter.add_fps(n, cfg.m)
    regions, planes = [], []
    for ci in centers:
        members = knn(pts, pts[ci], cfg.K)
        if counter is not None:
            counter.add_knn(n)
            counter.add_fit(len(members))
        try:
            plane = fit_plane(pts[members], center=pts[ci])
        except DegenerateGeometryError:
            continue
        regions.append(LocalRegion(int(ci), members))
        planes.append(plane)
    return regions, planes


def _inlier_fraction(plane: FittedPlane, pts: np.ndarray, tol: float) -> float:
    if len(pts) == 0:
        return 0.0
    return float(np.mean(plane.distances(pts) <= tol))


def plane_tolerance(plane: FittedPlane, key_members: np.ndarray, cfg: PropagationConfig) -> float:
    """Inlier distance for one plane: the configured one, or the key region's
    ``success_fraction`` quantile distance when that is larger."""
    d = np.sort(plane.distances(key_members))
    if len(d) == 0:
        return cfg.inlier_distance
    # smallest k with k / n >= success_fraction, guarded against float fuzz
    k = max(1, math.ceil(cfg.success_fraction * len(d) - 1e-9))
    return max(cfg.inlier_distance, float(d[k - 1]))


def propagate(
    window: RedundancyWindow,
    planes: Sequence[FittedPlane],
    cfg: PropagationConfig,
    counter: OpCounter | None = None,
    key_regions: Sequence[LocalRegion] | None = None,
) -> PropagationReport:
    """Track each key plane's center through the window and test the plane there.

    A plane succeeds in frame f when at least ``success_fraction`` of its
    tracked members lie within its tolerance of the plane. The tolerance is
    ``inlier_distance``, widened for curved key regions to the distance that
    ``success_fraction`` of the key region's own members satisfy, so a plane
    always holds on an unchanged frame. Failures are refitted on the tracked
    region.
    """
    n_frames, key = len(window), window.key_index
    n_planes = len(planes)
    key_pts = window.key_frame.points
    if key_regions is None:
        # the key region is reproduced exactly by re-querying around its center
        key_regions = []
        for p in planes:
            members = knn(key_pts, p.center, min(cfg.K, len(key_pts)))
            key_regions.append(LocalRegion(int(members[0]), members))

    frac = np.ones((n_planes, n_frames))
    success = np.ones((n_planes, n_frames), dtype=bool)
    tracked: list[list[LocalRegion]] = [[None] * n_frames for _ in range(n_planes)]  # type: ignore[list-item]
    refits: dict[tuple[int, int], FittedPlane | None] = {}

    for j, plane in enumerate(planes):
        region = key_regions[j]
        tracked[j][key] = region
        tol = plane_tolerance(plane, key_pts[region.member_indices], cfg)
        frac[j, key] = _inlier_fraction(plane, key_pts[region.member_indices], tol)
        for f, frame in enumerate(window.frames):
            if f == key:
                continue
            pts = frame.points
            k = min(cfg.K, len(pts))
            members = knn(pts, plane.center, k)
            if counter is not None:
                counter.add_knn(len(pts))
            tracked[j][f] = LocalRegion(int(members[0]), members)
            frac[j, f] = _inlier_fraction(plane, pts[members], tol)
            if frac[j, f] >= cfg.success_fraction:
                continue
            success[j, f] = False
            if counter is not None:
                counter.add_fit(len(members))
            try:
                refits[(j, f)] = fit_plane(pts[members], center=pts[members[0]])
            except (DegenerateGeometryError, ValueError):
                refits[(j, f)] = None

    report = PropagationReport(
        window_index=window.window_index,
        key_index=key,
        planes=list(planes),
        tracked=tracked,
        inlier_fraction=frac,
        success=success,
        refits=refits,
        residual_indices=[],
    )
    for f, frame in enumerate(window.frames):
        covered = np.zeros(len(frame.points), dtype=bool)
        covered[report.covered_indices(f)] = True
        report.residual_indices.append(np.flatnonzero(~covered))
        if counter is not None:
            counter.residual_points += int((~covered).sum())
    return report


def analyze_window(
    window: RedundancyWindow, cfg: PropagationConfig, counter: OpCounter | None = None
) -> PropagationReport:
    """Key-frame fitting followed by propagation through the window."""
    regions, planes = build_key_regions(window, cfg, counter)
    return propagate(window, planes, cfg, counter, key_regions=regions)
