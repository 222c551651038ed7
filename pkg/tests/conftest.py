import numpy as np
import pytest

from prenet.geometry import PointCloudFrame


def grid_patch(center, normal_axis, size=1.0, n_side=4, jitter=0.0, rng=None):
    """n_side x n_side points on an axis-aligned square centered at ``center``."""
    s = np.linspace(-size / 2, size / 2, n_side)
    u, v = np.meshgrid(s, s, indexing="ij")
    u, v = u.ravel(), v.ravel()
    if jitter and rng is not None:
        u = u + rng.uniform(-jitter, jitter, u.shape)
        v = v + rng.uniform(-jitter, jitter, v.shape)
    pts = np.zeros((len(u), 3))
    others = [a for a in range(3) if a != normal_axis]
    pts[:, others[0]] = u
    pts[:, others[1]] = v
    return pts + np.asarray(center, dtype=np.float64)


def patch_scene(n_patches=4, n_side=4, spacing=10.0, normal_axis=2, rng=None, jitter=0.0):
    """Well-separated, parallel square patches; returns points and patch ids."""
    parts, ids = [], []
    for i in range(n_patches):
        center = np.zeros(3)
        center[0] = i * spacing
        parts.append(grid_patch(center, normal_axis, n_side=n_side, jitter=jitter, rng=rng))
        ids.append(np.full(n_side * n_side, i))
    return np.concatenate(parts), np.concatenate(ids)


def frames_of(points_list, dt=1.0):
    return [PointCloudFrame(p, i * dt) for i, p in enumerate(points_list)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def moving_body_sequence(speed, seed=0, frames=24, points=512, noise=0.005):
    """Synthetic body whose every patch translates at ``speed`` m/s along a
    fixed per-patch direction; speed 0 is a static (re-noised) sequence."""
    from prenet.data_io import RegionMotion, SyntheticActionSpec, body_patches, generate_synthetic

    patches = body_patches()
    dirs = np.random.default_rng(seed + 100).normal(size=(len(patches), 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    motions = {p.name: RegionMotion(velocity=tuple(speed * d)) for p, d in zip(patches, dirs)} if speed else {}
    spec = SyntheticActionSpec(0, motions, frames, points, noise, seed, patches=patches)
    return generate_synthetic(spec).frames


def dynamic_patch_sequence(n_frames=8, step=1.0):
    """Four horizontal patches that jump ``step`` along their normal every frame."""
    base, _ = patch_scene()
    frames = []
    for f in range(n_frames):
        pts = base.copy()
        pts[:, 2] += f * step
        frames.append(pts)
    return frames_of(frames)
