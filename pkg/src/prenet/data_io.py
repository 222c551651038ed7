"""Sequence files, PLY directories, depth unprojection and synthetic actions.

Sequence file layout (little-endian)::

    b"PCSQ"  u16 version  u32 frame_count
    per frame: f64 timestamp  u32 point_count  point_count * (f32 x, f32 y, f32 z)
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorruptFileError, FormatError, InvalidArgumentError
from .geometry import PointCloudFrame

SEQ_MAGIC = b"PCSQ"
SEQ_VERSION = 1
_HEADER = struct.Struct("<4sHI")
_FRAME = struct.Struct("<dI")
DEFAULT_FPS = 30.0


# -- sequence files -----------------------------------------------------------


def encode_sequence_bytes(frames: Sequence[PointCloudFrame]) -> bytes:
    parts = [_HEADER.pack(SEQ_MAGIC, SEQ_VERSION, len(frames))]
    for i, frame in enumerate(frames):
        if len(frame.points) == 0:
            raise InvalidArgumentError(f"frame {i} is empty")
        parts.append(_FRAME.pack(frame.timestamp, len(frame.points)))
        parts.append(np.ascontiguousarray(frame.points, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_sequence_bytes(data: bytes) -> list[PointCloudFrame]:
    if len(data) == 0:
        raise FormatError("empty file: not a PCSQ sequence")
    if len(data) < _HEADER.size:
        if not SEQ_MAGIC.startswith(data[:4]):
            raise FormatError("bad magic: not a PCSQ sequence")
        raise CorruptFileError("truncated header", len(data))
    magic, version, n_frames = _HEADER.unpack_from(data, 0)
    if magic != SEQ_MAGIC:
        raise FormatError(f"bad magic {magic!r}: not a PCSQ sequence")
    if version != SEQ_VERSION:
        raise FormatError(f"unsupported PCSQ version {version}")
    off = _HEADER.size
    frames = []
    for i in range(n_frames):
        if off + _FRAME.size > len(data):
            raise CorruptFileError(f"truncated header of frame {i} of {n_frames}", off)
        ts, count = _FRAME.unpack_from(data, off)
        off += _FRAME.size
        if count == 0:
            raise FormatError(f"frame {i} is empty")
        nbytes = 12 * count
        if off + nbytes > len(data):
            raise CorruptFileError(f"truncated points of frame {i}: expected {nbytes} bytes, found {len(data) - off}", off)
        pts = np.frombuffer(data, dtype="<f4", count=3 * count, offset=off).reshape(count, 3).astype(np.float64)
        off += nbytes
        frames.append(PointCloudFrame(pts, ts))
    if off != len(data):
        raise CorruptFileError(f"{len(data) - off} unexpected trailing bytes", off)
    return frames


def write_sequence(frames: Sequence[PointCloudFrame], path) -> None:
    """Write frames as a PCSQ file; points are stored as float32."""
    Path(path).write_bytes(encode_sequence_bytes(frames))


def read_sequence(path) -> list[PointCloudFrame]:
    p = Path(path)
    if p.is_dir():
        return read_ply_directory(p)
    return decode_sequence_bytes(p.read_bytes())


def quantize(frames: Sequence[PointCloudFrame]) -> list[PointCloudFrame]:
    """Frames as they come back from a write/read round trip."""
    return [PointCloudFrame(f.points.astype(np.float32).astype(np.float64), f.timestamp) for f in frames]


# -- PLY ------------------------------------------------------------------------


def read_ply(path) -> np.ndarray:
    """Vertex x, y, z of an ASCII PLY file."""
    with open(path, "r", encoding="ascii") as fh:
        if fh.readline().strip() != "ply":
            raise FormatError(f"{path}: missing 'ply' header")
        n_vertex, props, in_vertex, fmt = None, [], False, None
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if fmt != "ascii":
            raise FormatError(f"{path}: only ASCII PLY is supported, got format {fmt}")
        if n_vertex is None or not {"x", "y", "z"} <= set(props):
            raise FormatError(f"{path}: no vertex element with x, y, z")
        cols = [props.index(c) for c in ("x", "y", "z")]
        rows = []
        for _ in range(n_vertex):
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: expected {n_vertex} vertices, found {len(rows)}")
            vals = line.split()
            try:
                rows.append([float(vals[c]) for c in cols])
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}: bad vertex line {len(rows)}: {line.strip()!r}") from exc
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def write_ply(points: np.ndarray, path) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"ply\nformat ascii 1.0\nelement vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for x, y, z in pts.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")


def read_ply_directory(path, fps: float = DEFAULT_FPS) -> list[PointCloudFrame]:
    """One frame per ``*.ply`` file, in lexicographic order, at a fixed frame rate."""
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() == ".ply")
    if not files:
        raise FormatError(f"{path}: no .ply files")
    return [PointCloudFrame(read_ply(f), i / fps) for i, f in enumerate(files)]


# -- depth ---------------------------------------------------------------------


def unproject_depth(depth, fx: float, fy: float, cx: float, cy: float, timestamp: float = 0.0) -> PointCloudFrame:
    """Pinhole back-projection; zero-depth pixels are treated as invalid."""
    if fx <= 0 or fy <= 0:
        raise InvalidArgumentError(f"focal lengths must be positive, got fx={fx}, fy={fy}")
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise InvalidArgumentError(f"depth must be a 2-D image, got shape {d.shape}")
    if np.any(d < 0):
        raise InvalidArgumentError("depth must be non-negative")
    v, u = np.nonzero(d > 0)
    z = d[v, u]
    pts = np.stack([(u - cx) * z / fx, (v - cy) * z / fy, z], axis=1)
    return PointCloudFrame(pts.reshape(-1, 3), timestamp)


def project_points(points: np.ndarray, fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return np.stack([fx * pts[:, 0] / pts[:, 2] + cx, fy * pts[:, 1] / pts[:, 2] + cy], axis=1)


# -- synthetic actions ------------------------------------------------------------


@dataclass(frozen=True)
class Patch:
    """Rectangle ``origin + s*edge_u + t*edge_v`` for s, t in [0, 1]."""

    name: str
    origin: tuple[float, float, float]
    edge_u: tuple[float, float, float]
    edge_v: tuple[float, float, float]

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.edge_u, self.edge_v)))


@dataclass(frozen=True)
class RegionMotion:
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    angular_velocity: float = 0.0
    axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    pivot: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def apply(self, pts: np.ndarray, t: float) -> np.ndarray:
        out = pts
        if self.angular_velocity != 0.0:
            axis = np.asarray(self.axis, dtype=np.float64)
            axis = axis / np.linalg.norm(axis)
            theta = self.angular_velocity * t
            k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
            rot = np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)
            pivot = np.asarray(self.pivot, dtype=np.float64)
            out = (out - pivot) @ rot.T + pivot
        if any(self.velocity):
            out = out + np.asarray(self.velocity, dtype=np.float64) * t
        return out


@dataclass(frozen=True)
class SyntheticActionSpec:
    class_id: int
    motions: dict[str, RegionMotion] = field(default_factory=dict)
    frames: int = 24
    points: int = 512
    noise: float = 0.005
    seed: int = 0
    fps: float = DEFAULT_FPS
    patches: tuple[Patch, ...] | None = None


@dataclass
class LabeledSequence:
    frames: list[PointCloudFrame]
    label: int
    patch_ids: np.ndarray | None = None


CLASS_NAMES = ("static", "translate-up", "translate-down", "rotate")
ARM_SPEED = 0.8
ARM_ANGULAR_SPEED = 1.2


def body_patches(rng: np.random.Generator | None = None) -> tuple[Patch, ...]:
    """A coarse standing figure made of planar patches.

    The right arm points forward horizontally at shoulder height; it is the
    part the synthetic actions move. With ``rng`` the sizes and placement
    are jittered.
    """
    s = 1.0 if rng is None else float(rng.uniform(0.9, 1.1))
    dx, dy = (0.0, 0.0) if rng is None else tuple(rng.uniform(-0.1, 0.1, size=2))
    shoulder = 1.4 * s

    def P(name, o, u, v):
        return Patch(name, (o[0] * s + dx, o[1] * s + dy, o[2] * s), tuple(np.multiply(u, s)), tuple(np.multiply(v, s)))

    return (
        P("torso", (-0.2, 0.0, 0.85), (0.4, 0, 0), (0, 0, 0.6)),
        P("head", (-0.1, 0.05, 1.55), (0.2, 0, 0), (0, 0, 0.22)),
        P("left_leg", (-0.18, 0.0, 0.05), (0.13, 0, 0), (0, 0, 0.78)),
        P("right_leg", (0.05, 0.0, 0.05), (0.13, 0, 0), (0, 0, 0.78)),
        P("left_arm", (-0.34, 0.0, 0.8), (0.12, 0, 0), (0, 0, 0.6)),
        Patch("right_arm", (0.22 * s + dx, 0.05 * s + dy, shoulder), (0.12 * s, 0, 0), (0, 0.55 * s, 0)),
    )


def action_motion(class_id: int, patches: Sequence[Patch], speed_scale: float = 1.0) -> dict[str, RegionMotion]:
    arm = next(p for p in patches if p.name == "right_arm")
    if class_id == 0:
        return {}
    if class_id == 1:
        return {"right_arm": RegionMotion(velocity=(0.0, 0.0, ARM_SPEED * speed_scale))}
    if class_id == 2:
        return {"right_arm": RegionMotion(velocity=(0.0, 0.0, -ARM_SPEED * speed_scale))}
    if class_id == 3:
        return {"right_arm": RegionMotion(angular_velocity=ARM_ANGULAR_SPEED * speed_scale, axis=(1.0, 0.0, 0.0), pivot=arm.origin)}
    raise InvalidArgumentError(f"unknown synthetic class {class_id}")


def action_spec(class_id: int, seed: int, frames: int = 24, points: int = 512, noise: float = 0.005, fps: float = DEFAULT_FPS) -> SyntheticActionSpec:
    """Default benchmark action: jittered body, class-dependent arm motion."""
    rng = np.random.default_rng([seed, 7919])
    patches = body_patches(rng)
    speed = float(rng.uniform(0.8, 1.2))
    return SyntheticActionSpec(class_id, action_motion(class_id, patches, speed), frames, points, noise, seed, fps, patches)


def generate_synthetic(spec: SyntheticActionSpec) -> LabeledSequence:
    """Sample the patches once, then move and re-noise them for every frame."""
    rng = np.random.default_rng(spec.seed)
    patches = spec.patches if spec.patches is not None else body_patches()
    areas = np.array([p.area for p in patches])
    which = np.sort(rng.choice(len(patches), size=spec.points, p=areas / areas.sum()))
    st = rng.uniform(0.0, 1.0, size=(spec.points, 2))
    base = np.empty((spec.points, 3))
    for i, p in enumerate(patches):
        sel = which == i
        base[sel] = np.asarray(p.origin) + st[sel, :1] * np.asarray(p.edge_u) + st[sel, 1:] * np.asarray(p.edge_v)

    frames = []
    for f in range(spec.frames):
        t = f / spec.fps
        pts = base.copy()
        for i, p in enumerate(patches):
            motion = spec.motions.get(p.name)
            if motion is not None:
                sel = which == i
                pts[sel] = motion.apply(base[sel], t)
        if spec.noise > 0:
            pts = pts + rng.normal(0.0, spec.noise, size=pts.shape)
        frames.append(PointCloudFrame(pts, t))
    return LabeledSequence(frames, spec.class_id, which)


# -- labeled datasets -----------------------------------------------------------


@dataclass
class DatasetItem:
    label: int
    split: str
    frames: list[PointCloudFrame] | None = None
    path: Path | None = None

    def load(self) -> list[PointCloudFrame]:
        if self.frames is None:
            if self.path is None:
                raise InvalidArgumentError("dataset item has neither frames nor a path")
            self.frames = read_sequence(self.path)
        return self.frames


@dataclass
class LabeledDataset:
    items: list[DatasetItem]
    num_classes: int

    def __post_init__(self):
        for it in self.items:
            if not 0 <= it.label < self.num_classes:
                raise InvalidArgumentError(f"label {it.label} outside [0, {self.num_classes})")
            if it.split not in ("train", "test"):
                raise InvalidArgumentError(f"split must be 'train' or 'test', got {it.split!r}")

    def split(self, name: str) -> list[DatasetItem]:
        return [it for it in self.items if it.split == name]


def synthetic_dataset(
    per_class: int = 40,
    seed: int = 0,
    num_classes: int = 4,
    frames: int = 24,
    points: int = 512,
    noise: float = 0.005,
    test_fraction: float = 0.2,
) -> LabeledDataset:
    """Balanced synthetic dataset with a stratified train/test split."""
    items = []
    n_test = int(round(per_class * test_fraction))
    for c in range(num_classes):
        for i in range(per_class):
            s = seed * 1_000_003 + c * 10_007 + i
            seq = generate_synthetic(action_spec(c, s, frames, points, noise))
            items.append(DatasetItem(c, "test" if i < n_test else "train", seq.frames))
    return LabeledDataset(items, num_classes)


MANIFEST_HEADER = ["path", "label", "split"]


def save_dataset(ds: LabeledDataset, directory) -> Path:
    """Write every sequence as PCSQ plus a ``manifest.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = d / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for i, it in enumerate(ds.items):
            name = f"seq_{i:05d}.pcsq"
            write_sequence(it.load(), d / name)
            w.writerow([name, it.label, it.split])
    return manifest


def load_dataset(manifest, num_classes: int | None = None) -> LabeledDataset:
    """Dataset from a ``path,label,split`` CSV; paths are relative to it."""
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.csv"
    if not manifest.exists():
        raise FormatError(f"{manifest}: no such manifest")
    items = []
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise FormatError(f"{manifest}: header must be {','.join(MANIFEST_HEADER)}")
        for row in reader:
            items.append(DatasetItem(int(row["label"]), row["split"], path=manifest.parent / row["path"]))
    if num_classes is None:
        num_classes = max((it.label for it in items), default=-1) + 1
    return LabeledDataset(items, num_classes)
