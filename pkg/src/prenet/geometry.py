"""Geometric kernels: sampling, neighborhoods, normals, plane fits, voxels.

Points are handled as ``(n, 3)`` float arrays. Every function here is pure,
so any of them may be called concurrently.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import DegenerateGeometryError, InvalidArgumentError

ON_PLANE_TOL = 1e-6
# X stays the pivot (x + a*y + b*z - c = 0) unless |n_x| drops below this
# fraction of the dominant normal component, i.e. |a|, |b| would exceed 10.
PIVOT_GUARD = 0.1
# relative eigenvalue floor below which a covariance direction counts as flat
_EIG_REL_TOL = 1e-10
# normal components closer than this are tied for the sign rule
_SIGN_TIE_TOL = 1e-9


class Axis(enum.IntEnum):
    X = 0
    Y = 1
    Z = 2

    @property
    def others(self) -> tuple[int, int]:
        return {0: (1, 2), 1: (0, 2), 2: (0, 1)}[int(self)]


@dataclass
class PointCloudFrame:
    points: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            if pts.size == 0:
                pts = pts.reshape(0, 3)
            else:
                raise InvalidArgumentError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.issubdtype(pts.dtype, np.floating):
            pts = pts.astype(np.float64)
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("points contain NaN or Inf")
        self.points = pts
        self.timestamp = float(self.timestamp)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class LocalRegion:
    center_index: int
    member_indices: np.ndarray

    @property
    def size(self) -> int:
        return len(self.member_indices)


@dataclass(frozen=True)
class FittedPlane:
    """Plane ``p_pivot + a*u + b*v - c = 0`` with (u, v) the other two axes."""

    a: float
    b: float
    c: float
    center: np.ndarray
    pivot_axis: Axis = Axis.X

    def as_vector(self) -> np.ndarray:
        """The 6-value form fed to the encoders: (a, b, c, cx, cy, cz)."""
        return np.array([self.a, self.b, self.c, *self.center], dtype=np.float64)

    def unit_normal(self) -> np.ndarray:
        n = np.zeros(3)
        u, v = self.pivot_axis.others
        n[int(self.pivot_axis)] = 1.0
        n[u] = self.a
        n[v] = self.b
        return n / np.linalg.norm(n)

    def signed_values(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        u, v = self.pivot_axis.others
        return pts[:, int(self.pivot_axis)] + self.a * pts[:, u] + self.b * pts[:, v] - self.c

    def distances(self, points: np.ndarray) -> np.ndarray:
        return np.abs(self.signed_values(points)) / math.sqrt(1.0 + self.a**2 + self.b**2)

    def residual(self, points: np.ndarray) -> float:
        """Least-squares objective: sum of squared implicit-form values."""
        r = self.signed_values(points)
        return float(r @ r)

    def contains(self, p, tol: float = ON_PLANE_TOL) -> bool:
        return bool(self.distances(p)[0] <= tol)


@dataclass
class VoxelGrid:
    voxel_size: float
    cells: dict[tuple[int, int, int], np.ndarray] = field(default_factory=dict)
    assignment: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def representatives(self) -> np.ndarray:
        """Cell center of every input point, in input order."""
        return (self.assignment + 0.5) * self.voxel_size


@dataclass(frozen=True)
class PlaneFitMode:
    m: int
    K: int


@dataclass(frozen=True)
class VoxelMode:
    size: float


@dataclass(frozen=True)
class RepresentationError:
    mean_error: float
    coverage: float
    n_params: int


def _as_points(frame) -> np.ndarray:
    if isinstance(frame, PointCloudFrame):
        return frame.points
    return np.asarray(frame, dtype=np.float64).reshape(-1, 3)


def farthest_point_sample(frame, m: int, start_index: int = 0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Greedy farthest point sampling.

    Each new pick maximizes the minimum squared distance to the points picked
    so far; ties go to the lowest index. Passing ``rng`` replaces
    ``start_index`` with a random start.
    """
    pts = _as_points(frame)
    n = len(pts)
    if n == 0:
        raise InvalidArgumentError("cannot sample from an empty frame")
    if not 1 <= m <= n:
        raise InvalidArgumentError(f"m must be in [1, {n}], got {m}")
    if rng is not None:
        start_index = int(rng.integers(n))
    if not 0 <= start_index < n:
        raise InvalidArgumentError(f"start_index {start_index} out of range for {n} points")

    selected = np.empty(m, dtype=np.int64)
    selected[0] = start_index
    min_d2 = np.sum((pts - pts[start_index]) ** 2, axis=1)
    min_d2[start_index] = -np.inf
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))
        selected[i] = nxt
        d2 = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[selected[: i + 1]] = -np.inf
    return selected


def knn(frame, query, K: int) -> np.ndarray:
    """Indices of the K points nearest ``query``, sorted by (distance, index)."""
    pts = _as_points(frame)
    n = len(pts)
    if not 1 <= K <= n:
        raise InvalidArgumentError(f"K must be in [1, {n}], got {K}")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    d2 = np.sum((pts - q) ** 2, axis=1)
    if K < n:
        kth = np.partition(d2, K - 1)[K - 1]
        cand = np.flatnonzero(d2 <= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((cand, d2[cand]))
    return cand[order[:K]]


def _covariance_eig(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    return np.linalg.eigh(cov)


def _normal_of(pts: np.ndarray) -> np.ndarray:
    if len(pts) < 3:
        raise InvalidArgumentError(f"need at least 3 points, got {len(pts)}")
    evals, evecs = _covariance_eig(pts)
    scale = max(evals[2], 0.0)
    if scale <= 0.0 or evals[1] <= _EIG_REL_TOL * scale:
        raise DegenerateGeometryError("points are coincident or collinear")
    n = evecs[:, 0]
    n = n / np.linalg.norm(n)
    # near-ties go to the first axis so the sign does not depend on rounding
    mags = np.abs(n)
    lead = int(np.flatnonzero(mags >= mags.max() - _SIGN_TIE_TOL)[0])
    if n[lead] < 0:
        n = -n
    return n


def estimate_normal(frame, region: LocalRegion | np.ndarray) -> np.ndarray:
    """Unit normal of a region: smallest-eigenvalue covariance eigenvector.

    The sign makes the largest-magnitude component positive; components
    equal to within 1e-9 count as tied and the first one wins.
    """
    pts = _as_points(frame)
    idx = region.member_indices if isinstance(region, LocalRegion) else np.asarray(region)
    return _normal_of(pts[idx])


def choose_pivot(normal: np.ndarray, guard: float = PIVOT_GUARD) -> Axis:
    mags = np.abs(normal)
    if mags[0] >= guard * mags.max():
        return Axis.X
    return Axis(int(np.argmax(mags)))


def fit_plane(points, center=None, pivot_axis: Axis | None = None) -> FittedPlane:
    """Least-squares plane through ``points``.

    Minimizes ``sum (p_pivot + a*u + b*v - c)**2`` through the normal
    equations, solved on centered coordinates in float64. ``center``
    defaults to the centroid.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise InvalidArgumentError(f"need at least 3 points, got {len(pts)}")
    normal = _normal_of(pts)
    pivot = choose_pivot(normal) if pivot_axis is None else Axis(pivot_axis)
    u_ax, v_ax = pivot.others

    mean = pts.mean(axis=0)
    d = pts - mean
    u, v, p = d[:, u_ax], d[:, v_ax], d[:, int(pivot)]
    # gram of [u, v]; the intercept drops out after centering
    suu, suv, svv = u @ u, u @ v, v @ v
    det = suu * svv - suv * suv
    if det <= 1e-12 * max(suu * svv, np.finfo(float).tiny):
        raise DegenerateGeometryError("singular normal equations")
    rhs_u, rhs_v = -(u @ p), -(v @ p)
    a = (svv * rhs_u - suv * rhs_v) / det
    b = (suu * rhs_v - suv * rhs_u) / det
    c = mean[int(pivot)] + a * mean[u_ax] + b * mean[v_ax]

    if center is None:
        center = mean
    return FittedPlane(float(a), float(b), float(c), np.asarray(center, dtype=np.float64).copy(), pivot)


def point_plane_distance(plane: FittedPlane, p) -> float:
    return float(plane.distances(np.asarray(p, dtype=np.float64))[0])


def voxelize(frame, voxel_size: float) -> VoxelGrid:
    if not voxel_size > 0:
        raise InvalidArgumentError(f"voxel_size must be positive, got {voxel_size}")
    pts = _as_points(frame)
    cells_idx = np.floor(pts / voxel_size).astype(np.int64)
    grid = VoxelGrid(voxel_size=float(voxel_size), assignment=cells_idx)
    for cell in np.unique(cells_idx, axis=0):
        key = (int(cell[0]), int(cell[1]), int(cell[2]))
        grid.cells[key] = (cell + 0.5) * voxel_size
    return grid


def plane_fit_regions(frame, m: int, K: int) -> list[tuple[LocalRegion, FittedPlane | None]]:
    """FPS centers, KNN memberships and one plane per region (None if degenerate)."""
    pts = _as_points(frame)
    out = []
    for ci in farthest_point_sample(pts, m):
        members = knn(pts, pts[ci], K)
        region = LocalRegion(int(ci), members)
        try:
            plane = fit_plane(pts[members], center=pts[ci])
        except DegenerateGeometryError:
            plane = None
        out.append((region, plane))
    return out


def representation_error(frame, mode: Union[PlaneFitMode, VoxelMode]) -> RepresentationError:
    """Mean distance between points and their compressed representation.

    Plane mode averages over (region, member) pairs of non-degenerate
    regions; coverage is the fraction of points inside at least one of them.
    Voxel mode averages point-to-cell-center distance over every point.
    """
    pts = _as_points(frame)
    if isinstance(mode, PlaneFitMode):
        dists = []
        covered = np.zeros(len(pts), dtype=bool)
        n_planes = 0
        for region, plane in plane_fit_regions(pts, mode.m, mode.K):
            if plane is None:
                continue
            n_planes += 1
            dists.append(plane.distances(pts[region.member_indices]))
            covered[region.member_indices] = True
        mean = float(np.mean(np.concatenate(dists))) if dists else float("nan")
        return RepresentationError(mean, float(covered.mean()), 6 * n_planes)
    if isinstance(mode, VoxelMode):
        grid = voxelize(pts, mode.size)
        err = np.linalg.norm(pts - grid.representatives(), axis=1)
        return RepresentationError(float(err.mean()), 1.0, 3 * len(grid.cells))
    raise InvalidArgumentError(f"unknown mode {mode!r}")


def voxel_size_for_budget(frame, max_cells: int, iters: int = 40) -> float:
    """Smallest voxel size (by bisection) whose occupied-cell count fits ``max_cells``."""
    pts = _as_points(frame)
    if max_cells < 1:
        raise InvalidArgumentError("max_cells must be >= 1")
    extent = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
    lo, hi = 1e-9, max(extent, 1e-9) * 2.0 + 1e-9
    # hi may still split the cloud across cells if it straddles a boundary
    while len(voxelize(pts, hi).cells) > max_cells:
        hi *= 2.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if len(voxelize(pts, mid).cells) <= max_cells:
            hi = mid
        else:
            lo = mid
    return hi


def normal_parallelism(frame, k: int = 10) -> float:
    """Mean angle in degrees between each point's normal and its neighbors' normals.

    Normals are unoriented, so the angle uses |cos|. Points whose
    neighborhood is degenerate are skipped.
    """
    pts = _as_points(frame)
    k = min(k, len(pts))
    neighborhoods = [knn(pts, p, k) for p in pts]
    normals = np.full((len(pts), 3), np.nan)
    for i, nb in enumerate(neighborhoods):
        try:
            normals[i] = _normal_of(pts[nb])
        except DegenerateGeometryError:
            pass
    angles = []
    for i, nb in enumerate(neighborhoods):
        if np.isnan(normals[i, 0]):
            continue
        others = normals[nb[1:]]
        others = others[~np.isnan(others[:, 0])]
        if len(others) == 0:
            continue
        cos = np.clip(np.abs(others @ normals[i]), 0.0, 1.0)
        angles.append(np.degrees(np.arccos(cos)).mean())
    return float(np.mean(angles)) if angles else float("nan")


def min_pairwise_distance(points: np.ndarray) -> float:
    pts = np.asarray(points, dtype=np.float64)
    d = np.sqrt(np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1))
    d[np.diag_indices(len(pts))] = np.inf
    return float(d.min())
