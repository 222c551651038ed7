import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prenet.counters import OpCounter
from prenet.errors import InvalidArgumentError, NumericFailureError
from prenet.neural import (
    AdamState,
    Mlp,
    NetworkDims,
    PrenetModel,
    SequenceInputs,
    StceLayer,
    StceModule,
    WindowInputs,
    cross_entropy,
    loss_and_grads,
    max_pool,
    segment_max,
    segment_max_backward,
    stce_forward,
    stce_module_forward,
    train_step,
)


def random_params(shapes, rng, scale=0.5):
    return {name: rng.normal(0, scale, shape) for name, shape in shapes}


def random_window_inputs(rng, n_tc, n_td, residual_counts):
    n_frames = len(residual_counts)
    return WindowInputs(
        tc_planes=rng.normal(size=(n_tc, 6)),
        tc_times=np.zeros(n_tc),
        td_planes=rng.normal(size=(n_td, 6)),
        td_times=rng.uniform(-1, 1, n_td),
        residual_points=rng.normal(size=(sum(residual_counts), 3)),
        residual_counts=np.array(residual_counts, dtype=np.int64),
        frame_times=np.linspace(-1, 1, n_frames) if n_frames > 1 else np.zeros(1),
    )


def toy_batch(rng):
    """Two sequences covering full, empty-TC, empty-TD and empty-TR windows."""
    s0 = SequenceInputs(
        [random_window_inputs(rng, 3, 4, [2, 3, 1]), random_window_inputs(rng, 0, 6, [0, 2, 2])],
        np.array([-0.5, 0.5]),
    )
    s1 = SequenceInputs([random_window_inputs(rng, 5, 0, [0, 0, 0])], np.array([0.0]))
    return [s0, s1], np.array([0, 1])


def fd_check(model, params, batch, labels, h=1e-4):
    """Worst per-tensor relative error between analytic and central-difference gradients."""
    _, grads = loss_and_grads(model, params, batch, labels)
    worst = {}
    for name, value in params.items():
        num = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp, _ = cross_entropy(model.forward(params, batch)[0], labels)
            flat[i] = old - h
            lm, _ = cross_entropy(model.forward(params, batch)[0], labels)
            flat[i] = old
            num.reshape(-1)[i] = (lp - lm) / (2 * h)
        a = grads[name]
        denom = max(np.linalg.norm(a) + np.linalg.norm(num), 1e-8)
        worst[name] = float(np.linalg.norm(a - num) / denom)
    return worst


class TestMlp:
    def test_zero_params(self, rng):
        mlp = Mlp("m", (3, 4, 2))
        params = {n: np.zeros(s) for n, s in mlp.param_shapes()}
        y, _ = mlp.forward(params, rng.normal(size=(5, 3)))
        np.testing.assert_array_equal(y, 0)

    def test_identity_no_final_relu(self):
        mlp = Mlp("m", (2, 2))
        params = {"m.0.weight": np.eye(2), "m.0.bias": np.zeros(2)}
        y, _ = mlp.forward(params, np.array([[3.0, -1.0]]))
        np.testing.assert_array_equal(y, [[3.0, -1.0]])

    def test_hidden_relu(self):
        mlp = Mlp("m", (1, 1, 1))
        params = {"m.0.weight": np.array([[1.0]]), "m.0.bias": np.zeros(1), "m.1.weight": np.array([[1.0]]), "m.1.bias": np.zeros(1)}
        y, _ = mlp.forward(params, np.array([[-2.0], [2.0]]))
        np.testing.assert_array_equal(y, [[0.0], [2.0]])

    def test_sharing(self, rng):
        mlp = Mlp("m", (4, 8, 3))
        params = random_params(mlp.param_shapes(), rng)
        x = rng.normal(size=(5, 4))
        batch, _ = mlp.forward(params, x)
        for i in range(5):
            single, _ = mlp.forward(params, x[i : i + 1])
            np.testing.assert_array_equal(batch[i], single[0])

    def test_width_mismatch(self):
        mlp = Mlp("m", (3, 2))
        with pytest.raises(InvalidArgumentError):
            mlp.forward({n: np.zeros(s) for n, s in mlp.param_shapes()}, np.zeros((1, 4)))

    def test_full_stack_param_counts(self):
        assert Mlp("t", (1, 32, 128, 6)).n_params == 5062
        assert Mlp("f", (6, 64, 256, 512)).n_params == 148672

    def test_mac_count(self, rng):
        mlp = Mlp("m", (3, 5, 2))
        c = OpCounter()
        mlp.forward(random_params(mlp.param_shapes(), rng), np.zeros((7, 3)), c)
        assert c.mlp_macs == 7 * (15 + 10)

    def test_linear_gradient(self, rng):
        # loss = sum of outputs of one linear layer -> dW = sum of inputs per row
        mlp = Mlp("m", (3, 2))
        params = random_params(mlp.param_shapes(), rng)
        x = rng.normal(size=(4, 3))
        y, acts = mlp.forward(params, x)
        grads = {n: np.zeros(s) for n, s in mlp.param_shapes()}
        mlp.backward(params, acts, np.ones_like(y), grads)
        np.testing.assert_allclose(grads["m.0.weight"], np.outer(x.sum(axis=0), np.ones(2)))
        np.testing.assert_allclose(grads["m.0.bias"], [4.0, 4.0])


class TestPooling:
    def test_single(self):
        np.testing.assert_array_equal(max_pool([[1.0, -2.0]]), [1.0, -2.0])

    def test_componentwise(self):
        np.testing.assert_array_equal(max_pool([[1, 5], [3, 2]]), [3, 5])

    def test_empty(self):
        with pytest.raises(InvalidArgumentError):
            max_pool(np.zeros((0, 2)))

    @given(st.lists(st.tuples(st.integers(-9, 9), st.integers(-9, 9)), min_size=1, max_size=8), st.randoms())
    def test_permutation_invariant(self, rows, rnd):
        shuffled = list(rows)
        rnd.shuffle(shuffled)
        np.testing.assert_array_equal(max_pool(rows), max_pool(shuffled))

    def test_gradient_routing(self):
        x = np.array([[1.0, 5.0], [3.0, 2.0]])
        out, arg = segment_max(x, np.array([2]))
        dx = segment_max_backward(np.ones((1, 2)), arg, 2)
        np.testing.assert_array_equal(dx, [[0, 1], [1, 0]])

    def test_ties_lowest_row(self):
        x = np.array([[2.0], [2.0], [1.0]])
        _, arg = segment_max(x, np.array([3]))
        assert arg.tolist() == [[0]]

    def test_segments_with_empty(self):
        x = np.array([[1.0], [4.0], [2.0]])
        out, arg = segment_max(x, np.array([1, 0, 2]))
        np.testing.assert_array_equal(out, [[1.0], [0.0], [4.0]])
        assert arg.tolist() == [[0], [-1], [1]]

    def test_counts_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            segment_max(np.zeros((3, 1)), np.array([1, 1]))

    def test_nan_rows_stay_in_segment(self):
        x = np.array([[1.0], [np.nan], [2.0], [np.nan]])
        out, arg = segment_max(x, np.array([2, 2]))
        assert np.isnan(out).all()
        assert arg.tolist() == [[0], [2]]
        segment_max_backward(np.ones((2, 1)), arg, 4)


def layer_params(layer, rng, zero_time=False):
    params = random_params(layer.param_shapes(), rng)
    if zero_time:
        for name in params:
            if ".time." in name:
                params[name][...] = 0
    return params


class TestStce:
    def test_zero_time_branch(self, rng):
        layer = StceLayer("l", 4, 3, (5,), (6,))
        params = layer_params(layer, rng, zero_time=True)
        x = rng.normal(size=(5, 4))
        got = stce_forward(layer, params, x, rng.uniform(-1, 1, 5))
        want, _ = layer.feature_mlp.forward(params, x)
        np.testing.assert_array_equal(got, want)

    def test_time_changes_output(self, rng):
        layer = StceLayer("l", 4, 3, (5,), (6,))
        params = layer_params(layer, rng)
        x = np.repeat(rng.normal(size=(1, 4)), 2, axis=0)
        y = stce_forward(layer, params, x, [-0.5, 0.75])
        assert not np.allclose(y[0], y[1])

    def test_hand_computed(self):
        layer = StceLayer("l", 2, 2, (), ())
        params = {
            "l.time.0.weight": np.array([[1.0, -1.0]]),
            "l.time.0.bias": np.array([0.5, 0.0]),
            "l.feature.0.weight": np.array([[1.0, 2.0], [0.0, 1.0]]),
            "l.feature.0.bias": np.array([0.0, 1.0]),
        }
        # t=2: embedding (2.5, -2); x + emb = (3.5, -1); (3.5, 7 - 1 + 1)
        y = stce_forward(layer, params, [[1.0, 1.0]], [2.0])
        np.testing.assert_array_equal(y, [[3.5, 7.0]])

    def test_length_mismatch(self, rng):
        layer = StceLayer("l", 2, 2, (), ())
        with pytest.raises(InvalidArgumentError):
            stce_forward(layer, layer_params(layer, rng), np.zeros((2, 2)), [0.0])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 7))
    def test_permutation_equivariance(self, seed, n):
        rng = np.random.default_rng(seed)
        module = StceModule("s", 4, (5, 5, 3), (3,), (6,))
        params = random_params(module.param_shapes(), rng)
        x, t = rng.normal(size=(n, 4)), rng.uniform(-1, 1, n)
        perm = rng.permutation(n)
        y = stce_module_forward(module, params, x, t)
        np.testing.assert_array_equal(stce_module_forward(module, params, x[perm], t[perm]), y[perm])

    def test_module_zero_params(self, rng):
        module = StceModule("s", 6, (4, 4, 4), (3,), (5,))
        params = {n: np.zeros(s) for n, s in module.param_shapes()}
        y = stce_module_forward(module, params, rng.normal(size=(3, 6)), np.zeros(3))
        np.testing.assert_array_equal(y, 0)

    def test_module_identity_skips(self, rng):
        module = StceModule("s", 4, (4, 4, 4), (3,), (5,))
        assert not any(module.projected)
        params = {n: np.zeros(s) for n, s in module.param_shapes()}
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(stce_module_forward(module, params, x, rng.uniform(size=3)), x)

    def test_module_projected_skip_trace(self, rng):
        # inner layers zero, first skip a projection P: out = x @ P through identity skips
        module = StceModule("s", 3, (2, 2, 2), (3,), (4,))
        params = {n: np.zeros(s) for n, s in module.param_shapes()}
        proj = rng.normal(size=(3, 2))
        params["s.skip0.weight"] = proj
        x = rng.normal(size=(4, 3))
        np.testing.assert_allclose(stce_module_forward(module, params, x, np.zeros(4)), x @ proj)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_module_gradients(self, seed):
        rng = np.random.default_rng(seed)
        module = StceModule("s", 3, (4, 4, 2), (3,), (5,))
        params = random_params(module.param_shapes(), rng)
        x, t = rng.normal(size=(6, 3)), rng.uniform(-1, 1, 6)
        target = rng.normal(size=(6, 2))

        def loss():
            y = stce_module_forward(module, params, x, t)
            return 0.5 * float(((y - target) ** 2).sum())

        y, caches = module.forward(params, x, t)
        grads = {n: np.zeros(s) for n, s in module.param_shapes()}
        module.backward(params, caches, y - target, grads)
        h = 1e-4
        for name, value in params.items():
            num = np.zeros_like(value)
            for i in range(value.size):
                old = value.flat[i]
                value.flat[i] = old + h
                lp = loss()
                value.flat[i] = old - h
                lm = loss()
                value.flat[i] = old
                num.flat[i] = (lp - lm) / (2 * h)
            err = np.linalg.norm(grads[name] - num) / max(np.linalg.norm(grads[name]) + np.linalg.norm(num), 1e-8)
            assert err < 1e-4, name


class TestModel:
    def test_widths(self):
        dims = NetworkDims.tiny()
        assert dims.fused_width == 2 * 5 + 4

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_full_gradient_check(self, seed):
        rng = np.random.default_rng(seed)
        model = PrenetModel(NetworkDims.tiny())
        params = model.init_params(seed)
        # nonzero biases so every parameter tensor is exercised
        for name in params:
            if name.endswith(".bias"):
                params[name] = rng.normal(0, 0.1, params[name].shape)
        batch, labels = toy_batch(rng)
        worst = fd_check(model, params, batch, labels)
        assert set(worst) == {n for n, _ in model.param_shapes()}
        bad = {n: e for n, e in worst.items() if not e < 1e-4}
        assert not bad

    def test_uniform_logits_loss(self):
        for C in (2, 4, 10):
            loss, _ = cross_entropy(np.zeros((3, C)), np.arange(3) % C)
            assert loss == pytest.approx(math.log(C), abs=1e-6)

    def test_zero_lr_leaves_params(self, rng):
        model = PrenetModel(NetworkDims.tiny())
        params = model.init_params(0)
        before = {k: v.copy() for k, v in params.items()}
        batch, labels = toy_batch(rng)
        params, loss = train_step(model, params, batch, labels, AdamState(lr=0.0))
        assert math.isfinite(loss)
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])

    def test_nan_loss_raises_without_update(self, rng):
        model = PrenetModel(NetworkDims.tiny())
        params = model.init_params(0)
        params["head.bias"][0] = np.nan
        before = {k: v.copy() for k, v in params.items()}
        state = AdamState(lr=0.1)
        batch, labels = toy_batch(rng)
        with pytest.raises(NumericFailureError):
            train_step(model, params, batch, labels, state)
        assert state.step == 0
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])

    def test_separable_convergence(self):
        rng = np.random.default_rng(0)
        model = PrenetModel(NetworkDims.tiny())
        params = model.init_params(1)
        batch, labels = [], []
        for i in range(8):
            label = i % 2
            w = random_window_inputs(rng, 3, 2, [2, 2])
            w.tc_planes[:, 0] = 2.0 if label else -2.0
            batch.append(SequenceInputs([w], np.zeros(1)))
            labels.append(label)
        labels = np.array(labels)
        state = AdamState(lr=1e-2)
        for _ in range(200):
            params, loss = train_step(model, params, batch, labels, state)
        final, _ = cross_entropy(model.forward(params, batch)[0], labels)
        assert final < 0.1

    def test_training_determinism(self):
        def run():
            rng = np.random.default_rng(4)
            model = PrenetModel(NetworkDims.tiny())
            params = model.init_params(7)
            batch, labels = toy_batch(rng)
            state = AdamState(lr=1e-2)
            for _ in range(10):
                params, _ = train_step(model, params, batch, labels, state)
            return params

        a, b = run(), run()
        assert list(a) == list(b)
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()

    def test_param_count_from_config(self):
        dims = NetworkDims.desk()
        model = PrenetModel(dims)
        assert model.n_params == sum(v.size for v in model.init_params(0).values())
        assert PrenetModel(NetworkDims.desk()).n_params == model.n_params

    def test_init_is_seeded(self):
        model = PrenetModel(NetworkDims.tiny())
        a, b, c = model.init_params(3), model.init_params(3), model.init_params(4)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not all(np.array_equal(a[k], c[k]) for k in a)

    def test_glorot_bounds(self):
        model = PrenetModel(NetworkDims.tiny())
        for name, value in model.init_params(0).items():
            if name.endswith(".bias"):
                assert not value.any()
            else:
                s = math.sqrt(6.0 / sum(value.shape))
                assert np.all(np.abs(value) <= s)

    def test_empty_branches_zero(self, rng):
        model = PrenetModel(NetworkDims.tiny())
        params = model.init_params(0)
        w = random_window_inputs(rng, 0, 0, [0, 0])
        fused, _ = model.encode_windows(params, [w])
        np.testing.assert_array_equal(fused, 0)

    def test_head_width_mismatch(self):
        model = PrenetModel(NetworkDims.tiny())
        with pytest.raises(InvalidArgumentError):
            model.logits(model.init_params(0), np.zeros(3))
