"""Tensor engine: primitive forward semantics, tape behaviour and gradients."""
import math
import threading

import numpy as np
import pytest

from medkan import tensor as T
from medkan.errors import AutogradError, ConfigError, GeometryError, ShapeError
from medkan.settings import settings
from medkan.tensor import Tensor


def _numeric_grad(loss_fn, leaf, eps=1e-6):
    grad = np.zeros_like(leaf.data)
    flat, out = leaf.data.reshape(-1), grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = loss_fn().item()
            flat[i] = original - eps
            minus = loss_fn().item()
            flat[i] = original
            out[i] = (plus - minus) / (2 * eps)
    return grad


def _rel(a, b):
    scale = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def _away_from_zero(rng, *shape):
    return np.sign(rng.normal(size=shape)) * rng.uniform(0.2, 1.5, size=shape)


def _conv_oracle(x, w, b, stride, pad, groups):
    n, c, h, width = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (width + 2 * pad - kw) // stride + 1
    per_group = o // groups
    out = np.zeros((n, o, ho, wo))
    for b_i in range(n):
        for oc in range(o):
            g = oc // per_group
            for i in range(ho):
                for j in range(wo):
                    total = 0.0
                    for ci in range(cg):
                        for ki in range(kh):
                            for kj in range(kw):
                                total += xp[b_i, g * cg + ci, i * stride + ki, j * stride + kj] * w[oc, ci, ki, kj]
                    out[b_i, oc, i, j] = total + (b[oc] if b is not None else 0.0)
    return out


class TestMatmul:
    def test_identity(self, rng):
        b = rng.normal(size=(3, 4))
        out = T.matmul(Tensor(np.eye(3)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_hand_computed(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]], dtype="f64"), Tensor([[0.0], [1.0]], dtype="f64"))
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_triple_loop_oracle(self, rng):
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        expected = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                expected[i, j] = sum(a[i, k] * b[k, j] for k in range(7))
        out = T.matmul(Tensor(a), Tensor(b))
        assert np.max(np.abs(out.data - expected)) < 1e-12

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_records_tape_only_when_needed(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        assert T.matmul(a, Tensor(np.ones((2, 2)))).node is not None
        assert T.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2)))).node is None


class TestConv2d:
    def test_pointwise_equals_matmul(self, rng):
        x, w = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(6, 3, 1, 1))
        out = T.conv2d(Tensor(x), Tensor(w))
        expected = (x.transpose(0, 2, 3, 1).reshape(-1, 3) @ w.reshape(6, 3).T).reshape(2, 4, 5, 6)
        np.testing.assert_allclose(out.data, expected.transpose(0, 3, 1, 2), atol=1e-12)

    def test_zero_weight_gives_bias(self):
        bias = np.array([1.5, -2.0, 0.25])
        out = T.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.zeros((3, 2, 3, 3))), Tensor(bias), pad=1)
        np.testing.assert_array_equal(out.data, np.broadcast_to(bias[None, :, None, None], (1, 3, 5, 5)))

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_grouped_direct_loop_oracle(self, rng, stride, pad):
        x, w, b = rng.normal(size=(2, 4, 5, 5)), rng.normal(size=(6, 2, 3, 3)), rng.normal(size=6)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad, groups=2)
        assert np.max(np.abs(out.data - _conv_oracle(x, w, b, stride, pad, 2))) < 1e-10

    def test_output_size_uses_floor(self):
        assert T.conv_output_size(5, 3, 2, 1) == 3
        assert T.conv_output_size(224, 3, 2, 1) == 112

    def test_divisibility_is_a_geometry_error(self):
        with pytest.raises(GeometryError):
            T.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((4, 1, 3, 3))), groups=2)

    def test_kernel_larger_than_input(self):
        with pytest.raises(GeometryError):
            T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        T.backward(T.sum_(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True, dtype="f64")
        T.backward(T.sum_(x * x))
        np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])

    def test_multiple_consumers_accumulate(self):
        x = Tensor([0.5, 2.0], requires_grad=True, dtype="f64")
        T.backward(T.sum_(x * x + x))
        np.testing.assert_array_equal(x.grad, [2.0, 5.0])

    def test_intermediates_receive_gradients(self):
        x = Tensor([1.0, 2.0], requires_grad=True, dtype="f64")
        y = x * 3.0
        T.backward(T.sum_(y * y))
        np.testing.assert_array_equal(y.grad, [6.0, 12.0])
        np.testing.assert_array_equal(x.grad, [18.0, 36.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(AutogradError):
            T.backward(x * 2.0)

    def test_loss_off_tape_rejected(self):
        with pytest.raises(AutogradError):
            T.backward(T.sum_(Tensor(np.ones(3))))

    def test_tape_is_freed(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = T.sum_(T.exp(x))
        T.backward(loss)
        assert loss.node is None

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.exp(x)
        assert not y.requires_grad and y.node is None


def _unary(op):
    def build(rng):
        x = Tensor(_away_from_zero(rng, 3, 4), requires_grad=True)
        return (lambda: op(x)), [x]

    return build


def _binary(op):
    def build(rng):
        a, b = Tensor(rng.normal(size=(3, 4)), requires_grad=True), Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        return (lambda: op(a, b)), [a, b]

    return build


def _layer_norm(rng):
    x = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
    g, b = Tensor(rng.normal(size=3), requires_grad=True), Tensor(rng.normal(size=3), requires_grad=True)
    return (lambda: T.layer_norm(x, g, b, axis=1)), [x, g, b]


def _bias_add(rng):
    x, b = Tensor(rng.normal(size=(2, 3, 2)), requires_grad=True), Tensor(rng.normal(size=3), requires_grad=True)
    return (lambda: T.bias_add(x, b, axis=1)), [x, b]


def _concat_slice(rng):
    a, b = Tensor(rng.normal(size=(2, 3)), requires_grad=True), Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    return (lambda: T.slice_axis(T.concat([a, b], axis=1), 1, 1, 4)), [a, b]


def _conv(rng):
    x, w = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True), Tensor(rng.normal(size=(4, 2, 3, 3)), requires_grad=True)
    return (lambda: T.conv2d(x, w, stride=2, pad=1, groups=2)), [x, w]


def _matmul(rng):
    a, b = Tensor(rng.normal(size=(3, 4)), requires_grad=True), Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    return (lambda: T.matmul(a, b)), [a, b]


PRIMITIVES = {
    "exp": _unary(T.exp),
    "log": _unary(lambda x: T.log(T.mul(x, x))),
    "neg": _unary(T.neg),
    "silu": _unary(T.silu),
    "relu": _unary(T.relu),
    "gelu": _unary(T.gelu),
    "scale_add_scalar": _unary(lambda x: T.add_scalar(T.scale(x, 0.3), 2.0)),
    "mean": _unary(lambda x: T.mean(x, axis=1, keepdims=True)),
    "reshape_transpose": _unary(lambda x: T.transpose(T.reshape(x, (2, 6)), (1, 0))),
    "softmax": _unary(lambda x: T.softmax(x, axis=1)),
    "log_softmax": _unary(lambda x: T.log_softmax(x, axis=0)),
    "add": _binary(T.add),
    "mul": _binary(T.mul),
    "matmul": _matmul,
    "bias_add": _bias_add,
    "concat_slice": _concat_slice,
    "layer_norm": _layer_norm,
    "conv2d": _conv,
    "im2col": _unary(lambda x: T.im2col(T.reshape(x, (1, 1, 3, 4)), 2, 2, stride=1, pad=1)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name, f64):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        forward, leaves = PRIMITIVES[name](rng)
        direction = Tensor(rng.normal(size=forward().shape))

        def loss():
            return T.sum_(T.mul(forward(), direction))

        T.backward(loss())
        for leaf in leaves:
            assert _rel(leaf.grad, _numeric_grad(loss, leaf)) < 1e-6, (name, seed)
            leaf.grad = None


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(Tensor(np.zeros((2, 4))), axis=1)
        np.testing.assert_allclose(out.data, 0.25)

    def test_analytic(self):
        out = T.softmax(Tensor([0.0, math.log(3.0)], dtype="f64"))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)

    def test_shift_invariant(self):
        logits = np.array([[0.0, 1.0, 2.0]])
        np.testing.assert_array_equal(
            T.softmax(Tensor(logits + 1000.0), axis=1).data, T.softmax(Tensor(logits), axis=1).data
        )

    def test_rows_sum_to_one(self, rng):
        out = T.softmax(Tensor(rng.normal(size=(5, 7)) * 30), axis=1)
        assert np.all(out.data > 0)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


class TestStructural:
    def test_reshape_transpose_round_trip(self, rng):
        data = rng.normal(size=(2, 3, 4))
        x = Tensor(data)
        back = T.reshape(T.transpose(T.transpose(T.reshape(x, (6, 4)), (1, 0)), (1, 0)), (2, 3, 4))
        np.testing.assert_array_equal(back.data, data)

    def test_concat_then_slice_recovers_inputs(self, rng):
        a, b = Tensor(rng.normal(size=(2, 3, 2))), Tensor(rng.normal(size=(2, 5, 2)))
        joined = T.concat([a, b], axis=1)
        np.testing.assert_array_equal(T.slice_axis(joined, 1, 0, 3).data, a.data)
        np.testing.assert_array_equal(T.slice_axis(joined, 1, 3, 8).data, b.data)

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_default_dtype_is_f32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32
        with T.default_dtype("f64"):
            assert Tensor([1, 2, 3]).dtype == np.float64


class TestThreads:
    def test_parallel_rows_matches_serial(self, rng):
        data = rng.normal(size=(4096, 3))
        with T.num_threads(1):
            serial = T.parallel_rows(np.exp, data)
        with T.num_threads(4):
            parallel = T.parallel_rows(np.exp, data)
        np.testing.assert_array_equal(serial, parallel)

    def test_fixed_thread_count_is_deterministic(self, rng):
        a, b = rng.normal(size=(2048, 32)), rng.normal(size=(32, 16))
        with T.num_threads(4):
            first = T.matmul(Tensor(a), Tensor(b)).data
            second = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_array_equal(first, second)

    def test_invalid_thread_count(self):
        with pytest.raises(ConfigError):
            T.set_num_threads(0)
        with pytest.raises(ConfigError):
            with T.num_threads(0):
                pass

    def test_override_is_per_thread(self):
        seen = {}
        entered, release = threading.Event(), threading.Event()

        def other():
            with T.num_threads(7):
                entered.set()
                release.wait(5)
                seen["other"] = T.get_num_threads()

        worker = threading.Thread(target=other)
        with T.num_threads(2):
            worker.start()
            entered.wait(5)
            seen["main"] = T.get_num_threads()
            release.set()
            worker.join(5)
        assert seen == {"main": 2, "other": 7}

    def test_set_num_threads_is_the_process_default(self):
        previous = T.get_num_threads()
        try:
            T.set_num_threads(3)
            assert T.get_num_threads() == 3
            with T.num_threads(5):
                assert T.get_num_threads() == 5
            assert T.get_num_threads() == 3
        finally:
            T.set_num_threads(previous)

    def test_concurrent_callers_growing_the_pool(self, rng):
        callers = 8
        arrays = [rng.normal(size=(settings.parallel_min_rows * k, 4)) for k in range(1, callers + 1)]
        barrier = threading.Barrier(callers)
        results, errors = [None] * callers, []

        def call(index):
            try:
                with T.num_threads(index + 1):
                    barrier.wait(5)
                    results[index] = T.parallel_rows(np.exp, arrays[index])
            except Exception as exc:
                errors.append(exc)

        threads = [threading.Thread(target=call, args=(i,)) for i in range(callers)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join(30)
        assert errors == []
        for array, result in zip(arrays, results):
            np.testing.assert_array_equal(result, np.exp(array))
