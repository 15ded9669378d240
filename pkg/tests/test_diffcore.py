import numpy as np
import pytest

from srnn import diffcore as dc
from srnn.diffcore import ParamStore, Tensor, grad_check


def rand_shape(rng, ndim):
    return tuple(int(s) for s in rng.integers(1, 6, size=ndim))


def away_from_kinks(rng, shape):
    # leaky_rectify has kinks at 0, 3 and -9; keep samples clear of them
    x = rng.uniform(-12, 5, size=shape)
    bad = (np.abs(x) < 0.05) | (np.abs(x - 3) < 0.05) | (np.abs(x + 9) < 0.05)
    x[bad] += 0.2
    return x


class TestForwardExamples:
    def test_leaky_rectify_negative_slope(self):
        assert dc.leaky_rectify(Tensor([-3.0])).data[0] == pytest.approx(-1.0)

    def test_leaky_rectify_clipped(self):
        assert dc.leaky_rectify(Tensor([10.0])).data[0] == 3.0
        assert dc.leaky_rectify(Tensor([-30.0])).data[0] == -3.0

    def test_matmul_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(dc.matmul(a, Tensor(np.eye(2))).data, a.data)

    def test_matmul_batched_leading_axes(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
        np.testing.assert_allclose(dc.matmul(a, b).data, a @ b)

    def test_sigmoid_stable_tails(self):
        out = dc.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_softplus_large(self):
        out = dc.softplus(Tensor([-800.0, 0.0, 800.0])).data
        np.testing.assert_allclose(out, [0.0, np.log(2.0), 800.0])


class TestErrors:
    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_add_shape_error(self):
        with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(4,\)"):
            dc.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))

    def test_concat_shape_error(self):
        with pytest.raises(dc.ShapeError):
            dc.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))])

    def test_backward_non_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(dc.ShapeError, match="scalar"):
            dc.backward(dc.mul(x, 2.0))

    def test_checked_mode_names_op(self):
        with dc.checked():
            with pytest.raises(dc.NonFiniteError, match="log"):
                dc.log(Tensor([-1.0]))

    def test_unchecked_mode_allows_nan(self):
        out = dc.log(Tensor([-1.0]))
        assert np.isnan(out.data[0])


class TestBackwardExamples:
    def test_sum_grad_is_ones(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        dc.backward(dc.sum(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_sum_square(self):
        x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
        dc.backward(dc.sum(dc.square(x)))
        np.testing.assert_array_equal(x.grad, [4.0, -2.0])

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
        dc.backward(dc.sum(dc.square(x)))
        dc.backward(dc.sum(dc.square(x)))
        np.testing.assert_array_equal(x.grad, [8.0, -4.0])

    def test_sum_rule(self):
        rng = np.random.default_rng(3)
        xv = rng.standard_normal((3, 4))
        f = lambda x: dc.sum(dc.tanh(x))
        g = lambda x: dc.sum(dc.mul(dc.exp(x), x))
        grads = []
        for fn in (f, g, lambda x: dc.add(f(x), g(x))):
            x = Tensor(xv, requires_grad=True)
            dc.backward(fn(x))
            grads.append(x.grad)
        np.testing.assert_allclose(grads[2], grads[0] + grads[1], rtol=1e-14, atol=0)

    def test_shared_subgraph_order(self):
        # y feeds both the output and z; a wrong topological order drops terms
        x = Tensor(np.array([0.7]), requires_grad=True)
        y = dc.mul(x, x)
        z = dc.mul(y, 3.0)
        dc.backward(dc.sum(dc.add(dc.mul(z, y), y)))  # 3x^4 + x^2
        assert x.grad[0] == pytest.approx(12 * 0.7 ** 3 + 2 * 0.7)

    def test_slices_accumulate(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        parts = [x[:, t] for t in range(3)] + [x[:, 1]]
        dc.backward(dc.sum(dc.stack(parts, axis=1)))
        np.testing.assert_array_equal(x.grad, [[1, 2, 1], [1, 2, 1]])

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with dc.no_grad():
            y = dc.sum(dc.exp(x))
        assert not y.requires_grad

    def test_detach_blocks_gradient(self):
        x = Tensor(np.array([1.5]), requires_grad=True)
        dc.backward(dc.sum(dc.mul(x, x.detach())))
        assert x.grad[0] == pytest.approx(1.5)


UNARY = {
    "sigmoid": dc.sigmoid, "tanh": dc.tanh, "exp": dc.exp, "square": dc.square,
    "softplus": dc.softplus, "neg": dc.neg,
    "log": lambda x: dc.log(dc.add(dc.square(x), 0.5)),
    "clamp": lambda x: dc.clamp(x, -0.8, 0.8),
    "leaky_rectify": dc.leaky_rectify,
    "sum_axis": lambda x: dc.sum(x, axis=-1),
    "mean": lambda x: dc.mean(x, axis=0, keepdims=True),
    "slice": lambda x: x[..., :1],
    "reshape": lambda x: dc.reshape(x, (-1,)),
}


class TestGradientExactness:
    """Tape gradients against central differences, 64-bit, random shapes 1..5."""

    @pytest.mark.parametrize("name", sorted(UNARY))
    @pytest.mark.parametrize("seed", range(3))
    def test_unary(self, name, seed):
        rng = np.random.default_rng(seed)
        shape = rand_shape(rng, int(rng.integers(1, 4)))
        x = away_from_kinks(rng, shape) if name in ("leaky_rectify", "clamp") else rng.standard_normal(shape)
        if name == "clamp":
            x = x / 10.0
            x[np.abs(np.abs(x) - 0.8) < 0.02] += 0.05
        w = rng.standard_normal(np.shape(UNARY[name](Tensor(x)).data))
        err = grad_check(lambda t: dc.sum(dc.mul(UNARY[name](t), w)), [x])
        assert err <= 1e-5, err

    @pytest.mark.parametrize("op", ["add", "sub", "mul"])
    @pytest.mark.parametrize("seed", range(3))
    def test_binary_broadcast(self, op, seed):
        rng = np.random.default_rng(seed)
        shape = rand_shape(rng, 3)
        bshape = tuple(s if rng.random() < 0.5 else 1 for s in shape[1:])
        a, b = rng.standard_normal(shape), rng.standard_normal(bshape)
        w = rng.standard_normal(shape)
        fn = getattr(dc, op)
        assert grad_check(lambda x, y: dc.sum(dc.mul(fn(x, y), w)), [a, b]) <= 1e-5

    @pytest.mark.parametrize("seed", range(3))
    def test_matmul(self, seed):
        rng = np.random.default_rng(seed)
        m, k, n, lead = rand_shape(rng, 4)
        a, b = rng.standard_normal((lead, m, k)), rng.standard_normal((k, n))
        w = rng.standard_normal((lead, m, n))
        assert grad_check(lambda x, y: dc.sum(dc.mul(dc.matmul(x, y), w)), [a, b]) <= 1e-5

    @pytest.mark.parametrize("seed", range(3))
    def test_concat_and_stack(self, seed):
        rng = np.random.default_rng(seed)
        r, c1, c2 = rand_shape(rng, 3)
        a, b = rng.standard_normal((r, c1)), rng.standard_normal((r, c2))
        w = rng.standard_normal((2, r, c1 + c2))

        def f(x, y):
            cat = dc.concat([x, y])
            return dc.sum(dc.mul(dc.stack([cat, dc.square(cat)], axis=0), w))

        assert grad_check(f, [a, b]) <= 1e-5

    @pytest.mark.parametrize("seed", range(3))
    def test_composition_through_saturations(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((3, 4)) * 3.0
        W = rng.standard_normal((4, 2))

        def f(x, w):
            h = dc.tanh(dc.matmul(x, w))
            return dc.sum(dc.mul(dc.sigmoid(dc.mul(h, 4.0)), dc.exp(dc.clamp(h, -0.5, 0.5))))

        assert grad_check(f, [a, W]) <= 1e-4


class TestDeterminism:
    def test_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
            W = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
            out = dc.sum(dc.leaky_rectify(dc.matmul(dc.tanh(x), W)))
            dc.backward(out)
            return out.data.copy(), x.grad.copy(), W.grad.copy()

        a, b = run(), run()
        for u, v in zip(a, b):
            assert np.array_equal(u, v)


class TestAdam:
    def test_first_step_size_is_learning_rate(self):
        store = ParamStore({"p": np.array([0.0])})
        store["p"].grad = np.array([1.0])
        store.adam_step(0.001)
        # m_hat = 1, v_hat = 1 at t = 1
        assert store["p"].data[0] == pytest.approx(-0.001 / (1.0 + 1e-8), rel=1e-12)
        assert store["p"].grad is None

    def test_zero_grad_leaves_params(self):
        store = ParamStore({"a": np.array([1.0, -2.0]), "b": np.ones((2, 2))})
        for _, t in store.items():
            t.grad = np.zeros_like(t.data)
        before = store.arrays()
        store.adam_step(0.01)
        for k, v in store.arrays().items():
            np.testing.assert_array_equal(v, before[k])

    def test_two_steps_monotone(self):
        store = ParamStore({"p": np.array([0.5])})
        values = [0.5]
        for _ in range(2):
            store["p"].grad = np.array([-2.0])
            store.adam_step(0.01)
            values.append(store["p"].data[0])
        assert values[0] < values[1] < values[2]
        # both bias-corrected steps equal lr for a constant gradient
        assert values[2] - values[0] == pytest.approx(0.02, rel=1e-6)

    def test_missing_grad_names_param(self):
        store = ParamStore({"weights.W0": np.ones(2)})
        with pytest.raises(ValueError, match="weights.W0"):
            store.adam_step(0.1)

    def test_sorted_iteration(self):
        store = ParamStore({"b": np.ones(1), "a": np.ones(1), "c": np.ones(1)})
        assert store.names() == ["a", "b", "c"]

    def test_duplicate_name_rejected(self):
        store = ParamStore({"a": np.ones(1)})
        with pytest.raises(KeyError):
            store.add("a", np.ones(1))

    def test_clip_grad_norm(self):
        store = ParamStore({"a": np.zeros(2)})
        store["a"].grad = np.array([3.0, 4.0])
        assert store.clip_grad_norm(1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(store["a"].grad, [0.6, 0.8])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        arrays = {"gen/w": rng.standard_normal((3, 4)), "inf/b": rng.standard_normal(7),
                  "scalar": np.array(np.pi), "f32": rng.standard_normal(3).astype(np.float32),
                  "empty": np.zeros((0, 2))}
        path = tmp_path / "m.ckpt"
        dc.save_checkpoint(path, arrays, {"note": "x"})
        back, meta = dc.load_checkpoint(path)
        assert meta == {"note": "x"}
        assert sorted(back) == sorted(arrays)
        for k, v in arrays.items():
            assert back[k].dtype == v.dtype
            assert back[k].tobytes() == v.tobytes()
            assert back[k].shape == v.shape

    def test_paramstore_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        store = ParamStore({"x": rng.standard_normal((2, 2)), "y": rng.standard_normal(3)})
        dc.save_checkpoint(tmp_path / "p.ckpt", store.arrays())
        other = ParamStore({"x": np.zeros((2, 2)), "y": np.zeros(3)})
        other.load_arrays(dc.load_checkpoint(tmp_path / "p.ckpt")[0])
        for k, v in store.arrays().items():
            assert other[k].data.tobytes() == v.tobytes()

    def test_header_and_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        dc.save_checkpoint(path, {"a": np.ones(2)})
        raw = path.read_bytes()
        assert raw[:8] == b"SRNNCKPT"
        assert int.from_bytes(raw[8:12], "little") == dc.CHECKPOINT_VERSION

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError):
            dc.load_checkpoint(path)


def test_float32_precision_switch():
    try:
        dc.set_dtype("float32")
        assert Tensor([1.0]).data.dtype == np.float32
    finally:
        dc.set_dtype("float64")
    assert Tensor([1.0]).data.dtype == np.float64
