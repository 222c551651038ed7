"""Dense neural engine with hand-written reverse-mode gradients.

Sets of vectors are stored as row matrices. Several sets are batched into
one matrix plus a ``counts`` array giving the (possibly zero) number of rows
in each consecutive set; pooling reduces each set to one row and empty sets
pool to zeros.

Parameters live in a plain ``dict[str, np.ndarray]`` whose insertion order is
the declaration order used by checkpoints. Gradients use the same keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .counters import OpCounter
from .errors import InvalidArgumentError, NumericFailureError

Params = dict[str, np.ndarray]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def rowwise_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` with each output row computed independently of the others.

    BLAS rounds a single-row product differently from a batched one; this
    keeps shared-MLP outputs bit-identical however the rows are batched.
    """
    return np.einsum("ni,io->no", x, w)


class Mlp:
    """Shared MLP: ReLU after every layer except the last.

    Weights are stored (in, out) so a set of row vectors maps as ``x @ W + b``.
    """

    def __init__(self, name: str, dims: Sequence[int]):
        if len(dims) < 2:
            raise InvalidArgumentError(f"an MLP needs at least two widths, got {dims}")
        self.name = name
        self.dims = tuple(int(d) for d in dims)

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for i, (din, dout) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            shapes.append((f"{self.name}.{i}.weight", (din, dout)))
            shapes.append((f"{self.name}.{i}.bias", (dout,)))
        return shapes

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    @property
    def macs_per_item(self) -> int:
        return sum(a * b for a, b in zip(self.dims[:-1], self.dims[1:]))

    def forward(self, params: Params, x: np.ndarray, counter: OpCounter | None = None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dims[0]:
            raise InvalidArgumentError(f"{self.name}: expected width {self.dims[0]}, got shape {x.shape}")
        if counter is not None:
            counter.mlp_macs += len(x) * self.macs_per_item
        acts = [x]
        n_layers = len(self.dims) - 1
        h = x
        for i in range(n_layers):
            z = rowwise_matmul(h, params[f"{self.name}.{i}.weight"]) + params[f"{self.name}.{i}.bias"]
            h = relu(z) if i < n_layers - 1 else z
            acts.append(h)
        return h, acts

    def backward(self, params: Params, acts: list[np.ndarray], dy: np.ndarray, grads: Params) -> np.ndarray:
        n_layers = len(self.dims) - 1
        d = dy
        for i in reversed(range(n_layers)):
            if i < n_layers - 1:
                d = d * (acts[i + 1] > 0)
            w = params[f"{self.name}.{i}.weight"]
            grads[f"{self.name}.{i}.weight"] += acts[i].T @ d
            grads[f"{self.name}.{i}.bias"] += d.sum(axis=0)
            d = d @ w.T
        return d


def max_pool(features) -> np.ndarray:
    """Componentwise maximum of a non-empty set of equal-width vectors."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise InvalidArgumentError("max_pool needs a non-empty set of vectors")
    return x.max(axis=0)


def segment_max(x: np.ndarray, counts: np.ndarray):
    """Max-pool consecutive row groups of sizes ``counts``.

    Returns the pooled (n_sets, width) matrix and, per entry, the row that
    supplied the maximum (lowest row on ties, -1 for empty sets).
    """
    counts = np.asarray(counts, dtype=np.int64)
    n_sets, width = len(counts), x.shape[1]
    if counts.sum() != len(x):
        raise InvalidArgumentError(f"counts sum to {counts.sum()} but there are {len(x)} rows")
    out = np.zeros((n_sets, width))
    arg = np.full((n_sets, width), -1, dtype=np.int64)
    nonempty = counts > 0
    if len(x):
        starts = (np.cumsum(counts) - counts)[nonempty]
        pooled = np.maximum.reduceat(x, starts, axis=0)
        out[nonempty] = pooled
        seg = np.repeat(np.arange(n_sets), counts)
        # NaN never compares equal; such entries fall back to the first row
        rows = np.where(x == out[seg], np.arange(len(x))[:, None], len(x))
        first = np.minimum.reduceat(rows, starts, axis=0)
        arg[nonempty] = np.where(first < len(x), first, starts[:, None])
    return out, arg


def segment_max_backward(dout: np.ndarray, arg: np.ndarray, n_rows: int) -> np.ndarray:
    dx = np.zeros((n_rows, dout.shape[1]))
    hit = arg >= 0
    cols = np.broadcast_to(np.arange(dout.shape[1]), arg.shape)
    dx[arg[hit], cols[hit]] = dout[hit]
    return dx


class StceLayer:
    """Time embedding added to the spatial vector, then a second shared MLP.

    ``out_i = feature_mlp(x_i + time_mlp(t_i))``.
    """

    def __init__(self, name: str, in_width: int, out_width: int, time_hidden: Sequence[int], feature_hidden: Sequence[int]):
        self.name = name
        self.in_width = in_width
        self.out_width = out_width
        self.time_mlp = Mlp(f"{name}.time", (1, *time_hidden, in_width))
        self.feature_mlp = Mlp(f"{name}.feature", (in_width, *feature_hidden, out_width))

    def param_shapes(self):
        return self.time_mlp.param_shapes() + self.feature_mlp.param_shapes()

    def forward(self, params: Params, x: np.ndarray, t: np.ndarray, counter: OpCounter | None = None):
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        if len(t) != len(x):
            raise InvalidArgumentError(f"{self.name}: {len(x)} spatial vectors but {len(t)} times")
        emb, time_acts = self.time_mlp.forward(params, t, counter)
        y, feat_acts = self.feature_mlp.forward(params, x + emb, counter)
        return y, (time_acts, feat_acts)

    def backward(self, params: Params, cache, dy: np.ndarray, grads: Params) -> np.ndarray:
        time_acts, feat_acts = cache
        ds = self.feature_mlp.backward(params, feat_acts, dy, grads)
        self.time_mlp.backward(params, time_acts, ds, grads)
        return ds


class StceModule:
    """Three STCE layers, each wrapped by an additive skip connection.

    The skip is the identity when a layer keeps its width and a learned
    linear projection (no bias) when it changes it.
    """

    def __init__(
        self,
        name: str,
        in_width: int,
        widths: Sequence[int],
        time_hidden: Sequence[int],
        feature_hidden: Sequence[int],
    ):
        self.name = name
        self.in_width = in_width
        self.widths = tuple(widths)
        self.layers = []
        self.projected = []
        prev = in_width
        for i, w in enumerate(self.widths):
            self.layers.append(StceLayer(f"{name}.layer{i}", prev, w, time_hidden, feature_hidden))
            self.projected.append(prev != w)
            prev = w

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def param_shapes(self):
        shapes = []
        for i, layer in enumerate(self.layers):
            shapes += layer.param_shapes()
            if self.projected[i]:
                shapes.append((f"{self.name}.skip{i}.weight", (layer.in_width, layer.out_width)))
        return shapes

    def forward(self, params: Params, x: np.ndarray, t: np.ndarray, counter: OpCounter | None = None):
        caches = []
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.in_width:
            raise InvalidArgumentError(f"{self.name}: expected width {self.in_width}, got shape {h.shape}")
        for i, layer in enumerate(self.layers):
            y, cache = layer.forward(params, h, t, counter)
            if self.projected[i]:
                y = y + rowwise_matmul(h, params[f"{self.name}.skip{i}.weight"])
                if counter is not None:
                    counter.mlp_macs += len(h) * layer.in_width * layer.out_width
            else:
                y = y + h
            caches.append((h, cache))
            h = y
        return h, caches

    def backward(self, params: Params, caches, dy: np.ndarray, grads: Params) -> np.ndarray:
        d = dy
        for i in reversed(range(len(self.layers))):
            h_in, cache = caches[i]
            dx = self.layers[i].backward(params, cache, d, grads)
            if self.projected[i]:
                key = f"{self.name}.skip{i}.weight"
                grads[key] += h_in.T @ d
                dx = dx + d @ params[key].T
            else:
                dx = dx + d
            d = dx
        return d


def stce_forward(layer: StceLayer, params: Params, spatial, times) -> np.ndarray:
    return layer.forward(params, np.asarray(spatial, dtype=np.float64), times)[0]


def stce_module_forward(module: StceModule, params: Params, spatial, times) -> np.ndarray:
    return module.forward(params, np.asarray(spatial, dtype=np.float64), times)[0]


@dataclass(frozen=True)
class NetworkDims:
    """Layer widths of the full network.

    ``*_time`` and ``*_feature`` are the hidden widths of each STCE layer's
    two shared MLPs; the time MLP always starts at 1 and ends at the layer's
    input width, the feature MLP ends at the branch width.
    """

    plane_time: tuple[int, ...] = (32, 128)
    plane_feature: tuple[int, ...] = (64, 256)
    plane_width: int = 512
    point_mlp: tuple[int, ...] = (64, 128, 1024)
    residual_time: tuple[int, ...] = (32, 256)
    residual_feature: tuple[int, ...] = (512,)
    residual_width: int = 256
    sequence_time: tuple[int, ...] = (32, 128)
    sequence_feature: tuple[int, ...] = (256,)
    sequence_width: int = 256
    num_classes: int = 4

    @classmethod
    def full(cls, num_classes: int = 4) -> "NetworkDims":
        return cls(num_classes=num_classes)

    @classmethod
    def desk(cls, num_classes: int = 4) -> "NetworkDims":
        """Narrow widths that train in minutes on one CPU core."""
        return cls(
            plane_time=(8, 16),
            plane_feature=(16, 32),
            plane_width=32,
            point_mlp=(16, 32, 64),
            residual_time=(8, 16),
            residual_feature=(32,),
            residual_width=32,
            sequence_time=(8, 16),
            sequence_feature=(32,),
            sequence_width=32,
            num_classes=num_classes,
        )

    @classmethod
    def tiny(cls, num_classes: int = 2) -> "NetworkDims":
        return cls(
            plane_time=(3,),
            plane_feature=(4,),
            plane_width=5,
            point_mlp=(4, 6),
            residual_time=(3,),
            residual_feature=(4,),
            residual_width=4,
            sequence_time=(3,),
            sequence_feature=(5,),
            sequence_width=4,
            num_classes=num_classes,
        )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkDims":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    @property
    def fused_width(self) -> int:
        return 2 * self.plane_width + self.residual_width


@dataclass
class WindowInputs:
    """Geometry of one window, reduced to what the encoders consume.

    Times are already normalized. Residual points are grouped by frame with
    ``residual_counts[f]`` rows for frame f.
    """

    tc_planes: np.ndarray
    tc_times: np.ndarray
    td_planes: np.ndarray
    td_times: np.ndarray
    residual_points: np.ndarray
    residual_counts: np.ndarray
    frame_times: np.ndarray


@dataclass
class SequenceInputs:
    windows: list[WindowInputs]
    window_times: np.ndarray


def _stack(arrays, width) -> np.ndarray:
    arrays = [np.asarray(a, dtype=np.float64).reshape(-1, width) for a in arrays]
    return np.concatenate(arrays, axis=0) if arrays else np.zeros((0, width))


def _cat(arrays) -> np.ndarray:
    arrays = [np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays]
    return np.concatenate(arrays) if arrays else np.zeros(0)


class PrenetModel:
    """Window encoders (consistency, difference, residual), the cross-window
    STCE module and a linear classification head."""

    def __init__(self, dims: NetworkDims):
        self.dims = dims
        self.tc = StceModule("tc", 6, (dims.plane_width,) * 3, dims.plane_time, dims.plane_feature)
        self.td = StceModule("td", 6, (dims.plane_width,) * 3, dims.plane_time, dims.plane_feature)
        self.point_mlp = Mlp("tr.point", (3, *dims.point_mlp))
        self.tr = StceModule("tr", dims.point_mlp[-1], (dims.residual_width,) * 3, dims.residual_time, dims.residual_feature)
        self.seq = StceModule("seq", dims.fused_width, (dims.sequence_width,) * 3, dims.sequence_time, dims.sequence_feature)

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = (
            self.tc.param_shapes()
            + self.td.param_shapes()
            + self.point_mlp.param_shapes()
            + self.tr.param_shapes()
            + self.seq.param_shapes()
        )
        shapes.append(("head.weight", (self.dims.sequence_width, self.dims.num_classes)))
        shapes.append(("head.bias", (self.dims.num_classes,)))
        return shapes

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    def init_params(self, seed: int) -> Params:
        """Glorot-uniform weights, zero biases, drawn in declaration order."""
        rng = np.random.default_rng(seed)
        params: Params = {}
        for name, shape in self.param_shapes():
            if name.endswith(".bias"):
                params[name] = np.zeros(shape)
            else:
                s = math.sqrt(6.0 / (shape[0] + shape[1]))
                params[name] = rng.uniform(-s, s, size=shape)
        return params

    def zero_grads(self) -> Params:
        return {name: np.zeros(shape) for name, shape in self.param_shapes()}

    def check_params(self, params: Params) -> None:
        for name, shape in self.param_shapes():
            if name not in params or params[name].shape != shape:
                got = None if name not in params else params[name].shape
                raise InvalidArgumentError(f"parameter {name}: expected shape {shape}, got {got}")

    # -- window level -------------------------------------------------------

    def encode_windows(self, params: Params, windows: Sequence[WindowInputs], counter: OpCounter | None = None):
        """Fused window features ``tc | td | tr`` for a batch of windows."""
        n_w = len(windows)
        tc_counts = np.array([len(w.tc_planes) for w in windows], dtype=np.int64)
        td_counts = np.array([len(w.td_planes) for w in windows], dtype=np.int64)

        tc_x = _stack([w.tc_planes for w in windows], 6)
        tc_h, tc_cache = self.tc.forward(params, tc_x, _cat([w.tc_times for w in windows]), counter)
        tc, tc_arg = segment_max(tc_h, tc_counts)

        td_x = _stack([w.td_planes for w in windows], 6)
        td_h, td_cache = self.td.forward(params, td_x, _cat([w.td_times for w in windows]), counter)
        td, td_arg = segment_max(td_h, td_counts)

        # residual points -> per-frame vectors -> per-window vector
        pts = _stack([w.residual_points for w in windows], 3)
        frame_counts = np.concatenate([np.asarray(w.residual_counts, dtype=np.int64) for w in windows]) if n_w else np.zeros(0, np.int64)
        frame_times = _cat([w.frame_times for w in windows])
        p_h, p_cache = self.point_mlp.forward(params, pts, counter)
        frame_vecs, frame_arg = segment_max(p_h, frame_counts)
        live = frame_counts > 0
        win_of_frame = np.repeat(np.arange(n_w), [len(w.residual_counts) for w in windows])
        tr_counts = np.bincount(win_of_frame[live], minlength=n_w).astype(np.int64)
        tr_h, tr_cache = self.tr.forward(params, frame_vecs[live], frame_times[live], counter)
        tr, tr_arg = segment_max(tr_h, tr_counts)

        fused = np.concatenate([tc, td, tr], axis=1)
        cache = (tc_cache, tc_arg, len(tc_h), td_cache, td_arg, len(td_h), p_cache, frame_arg, len(p_h), live, tr_cache, tr_arg, len(tr_h))
        return fused, cache

    def backward_windows(self, params: Params, cache, dfused: np.ndarray, grads: Params) -> None:
        (tc_cache, tc_arg, n_tc, td_cache, td_arg, n_td, p_cache, frame_arg, n_p, live, tr_cache, tr_arg, n_tr) = cache
        pw = self.dims.plane_width
        dtc, dtd, dtr = dfused[:, :pw], dfused[:, pw : 2 * pw], dfused[:, 2 * pw :]
        self.tc.backward(params, tc_cache, segment_max_backward(dtc, tc_arg, n_tc), grads)
        self.td.backward(params, td_cache, segment_max_backward(dtd, td_arg, n_td), grads)
        dlive = self.tr.backward(params, tr_cache, segment_max_backward(dtr, tr_arg, n_tr), grads)
        dframes = np.zeros((len(live), dlive.shape[1]))
        dframes[live] = dlive
        self.point_mlp.backward(params, p_cache, segment_max_backward(dframes, frame_arg, n_p), grads)

    # -- sequence level -----------------------------------------------------

    def aggregate(self, params: Params, fused: np.ndarray, window_times: np.ndarray, counts: np.ndarray, counter: OpCounter | None = None):
        """Cross-window STCE module then a max pool per sequence."""
        h, cache = self.seq.forward(params, fused, window_times, counter)
        feats, arg = segment_max(h, counts)
        return feats, (cache, arg, len(h))

    def backward_aggregate(self, params: Params, cache, dfeats: np.ndarray, grads: Params) -> np.ndarray:
        seq_cache, arg, n = cache
        return self.seq.backward(params, seq_cache, segment_max_backward(dfeats, arg, n), grads)

    def logits(self, params: Params, feats: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        if feats.shape[1] != self.dims.sequence_width:
            raise InvalidArgumentError(f"head expects width {self.dims.sequence_width}, got {feats.shape[1]}")
        if counter is not None:
            counter.mlp_macs += len(feats) * self.dims.sequence_width * self.dims.num_classes
        return feats @ params["head.weight"] + params["head.bias"]

    def forward(self, params: Params, batch: Sequence[SequenceInputs], counter: OpCounter | None = None):
        windows = [w for s in batch for w in s.windows]
        counts = np.array([len(s.windows) for s in batch], dtype=np.int64)
        fused, wcache = self.encode_windows(params, windows, counter)
        times = _cat([s.window_times for s in batch])
        feats, acache = self.aggregate(params, fused, times, counts, counter)
        logits = self.logits(params, feats, counter)
        return logits, (wcache, acache, feats)

    def backward(self, params: Params, cache, dlogits: np.ndarray) -> Params:
        wcache, acache, feats = cache
        grads = self.zero_grads()
        grads["head.weight"] += feats.T @ dlogits
        grads["head.bias"] += dlogits.sum(axis=0)
        dfeats = dlogits @ params["head.weight"].T
        dfused = self.backward_aggregate(params, acache, dfeats, grads)
        self.backward_windows(params, wcache, dfused, grads)
        return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -float(log_probs[np.arange(n), labels].mean())
    d = np.exp(log_probs)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def update(self, params: Params, grads: Params) -> None:
        self.step += 1
        b1c = 1.0 - self.beta1**self.step
        b2c = 1.0 - self.beta2**self.step
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def loss_and_grads(model: PrenetModel, params: Params, batch: Sequence[SequenceInputs], labels) -> tuple[float, Params]:
    logits, cache = model.forward(params, batch)
    loss, dlogits = cross_entropy(logits, labels)
    if not math.isfinite(loss):
        raise NumericFailureError(f"loss is {loss}")
    return loss, model.backward(params, cache, dlogits)


def train_step(model: PrenetModel, params: Params, batch: Sequence[SequenceInputs], labels, state: AdamState) -> tuple[Params, float]:
    """One Adam step on the mean cross-entropy of ``batch``.

    Returns the params (updated in place) and the loss measured before the
    update. A non-finite loss leaves params and optimizer state untouched.
    """
    loss, grads = loss_and_grads(model, params, batch, labels)
    state.update(params, grads)
    return params, loss
