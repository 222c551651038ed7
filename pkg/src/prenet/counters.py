"""Operation counting used to compare redundancy-eliminating runs."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

# 3x3 covariance (6 sums) plus the 2x2 normal-equation gram and rhs (5 sums)
# per point, plus a fixed cost for the 3x3 eigen solve and back-substitution.
FIT_MACS_PER_POINT = 11
FIT_MACS_FIXED = 100
# one squared Euclidean distance in 3D
DISTANCE_MACS = 3


@dataclass
class OpCounter:
    mlp_macs: int = 0
    plane_fits: int = 0
    plane_fit_points: int = 0
    knn_queries: int = 0
    knn_distance_evals: int = 0
    fps_runs: int = 0
    fps_distance_evals: int = 0
    residual_points: int = 0

    def add_fit(self, n_points: int) -> None:
        self.plane_fits += 1
        self.plane_fit_points += n_points

    def add_knn(self, n_points: int) -> None:
        self.knn_queries += 1
        self.knn_distance_evals += n_points

    def add_fps(self, n_points: int, m: int) -> None:
        self.fps_runs += 1
        self.fps_distance_evals += n_points * m

    def merge(self, other: "OpCounter") -> "OpCounter":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def __add__(self, other: "OpCounter") -> "OpCounter":
        return OpCounter().merge(self).merge(other)

    def fit_macs(self) -> int:
        return FIT_MACS_PER_POINT * self.plane_fit_points + FIT_MACS_FIXED * self.plane_fits

    def weighted_total(self) -> int:
        """MACs plus solver cost of plane fits plus distance evaluations."""
        return (
            self.mlp_macs
            + self.fit_macs()
            + DISTANCE_MACS * (self.knn_distance_evals + self.fps_distance_evals)
        )

    def as_dict(self) -> dict:
        d = asdict(self)
        d["weighted_total"] = self.weighted_total()
        return d


def redundancy_ratio(with_propagation: OpCounter, without: OpCounter) -> float:
    """Weighted cost of the per-frame baseline over the propagating run.

    Values above 1 mean propagation saved work. A sequence where every plane
    fails can land slightly below 1 because tracking queries are not free.
    """
    num = without.weighted_total()
    den = with_propagation.weighted_total()
    if den == 0:
        raise ZeroDivisionError("propagating run performed no operations")
    return num / den


def plane_fit_ratio(with_propagation: OpCounter, without: OpCounter) -> float:
    if with_propagation.plane_fits == 0:
        raise ZeroDivisionError("propagating run performed no plane fits")
    return without.plane_fits / with_propagation.plane_fits
