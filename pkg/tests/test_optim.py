"""Adam with coupled weight decay."""
import numpy as np
import pytest

from medkan import tensor as T
from medkan.config import TrainConfig
from medkan.errors import ShapeError
from medkan.gradcheck import toy_config
from medkan.losses import cross_entropy
from medkan.model import MedKAN
from medkan.nn import Parameter
from medkan.optim import TrainState, adam_step, step_model
from medkan.tensor import Tensor


def _adam_oracle(theta, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        g = g + wd * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return theta


class TestAdam:
    def test_zero_gradient_is_noop(self, rng):
        p = Parameter(rng.normal(size=(3, 4)), dtype="f64")
        before = p.data.copy()
        adam_step({"p": p}, {"p": np.zeros((3, 4))}, TrainState(), TrainConfig(lr=1e-2, weight_decay=0.0))
        np.testing.assert_array_equal(p.data, before)

    def test_missing_gradient_is_skipped(self, rng):
        p = Parameter(rng.normal(size=3), dtype="f64")
        before = p.data.copy()
        state = TrainState()
        adam_step({"p": p}, {"p": None}, state, TrainConfig())
        np.testing.assert_array_equal(p.data, before)
        assert state.step == 1 and "p" not in state.m

    def test_first_step_is_signed_lr(self, rng):
        p = Parameter(rng.normal(size=(4, 4)), dtype="f64")
        before = p.data.copy()
        grad = rng.normal(size=(4, 4))
        adam_step({"p": p}, {"p": grad}, TrainState(), TrainConfig(lr=1e-3, weight_decay=0.0))
        np.testing.assert_allclose(p.data - before, -1e-3 * np.sign(grad), atol=1e-7)

    def test_ten_step_oracle(self, rng):
        theta = rng.normal(size=(3, 5))
        grads = [rng.normal(size=(3, 5)) for _ in range(10)]
        p = Parameter(theta.copy(), dtype="f64")
        state = TrainState()
        cfg = TrainConfig(lr=5e-3, weight_decay=1e-2)
        for g in grads:
            adam_step({"p": p}, {"p": g}, state, cfg)
        assert state.step == 10
        assert np.max(np.abs(p.data - _adam_oracle(theta, grads, 5e-3, 1e-2))) < 1e-10

    def test_weight_decay_shrinks(self, rng):
        p = Parameter(rng.uniform(0.5, 1.0, size=8) * rng.choice([-1, 1], size=8), dtype="f64")
        before = np.abs(p.data).copy()
        state = TrainState()
        for _ in range(5):
            adam_step({"p": p}, {"p": np.zeros(8)}, state, TrainConfig(lr=1e-2, weight_decay=0.1))
        assert np.all(np.abs(p.data) < before)

    def test_moments_keep_parameter_dtype(self, rng):
        p = Parameter(rng.normal(size=3), dtype="f32")
        state = TrainState()
        adam_step({"p": p}, {"p": rng.normal(size=3)}, state, TrainConfig())
        assert p.dtype == state.m["p"].dtype == state.v["p"].dtype == np.float32

    def test_gradient_shape_mismatch(self):
        p = Parameter(np.zeros(3), dtype="f64")
        with pytest.raises(ShapeError):
            adam_step({"p": p}, {"p": np.zeros(4)}, TrainState(), TrainConfig())

    def test_moment_shape_mismatch(self):
        p = Parameter(np.zeros(3), dtype="f64")
        state = TrainState(m={"p": np.zeros(2)}, v={"p": np.zeros(2)})
        with pytest.raises(ShapeError):
            adam_step({"p": p}, {"p": np.ones(3)}, state, TrainConfig())


class TestStepModel:
    def test_updates_every_parameter_with_gradient(self, rng):
        model = MedKAN(toy_config(), seed=0)
        before = model.state_dict()
        x = Tensor(rng.normal(size=(4, 1, 8, 8)).astype(np.float32))
        T.backward(cross_entropy(model(x), np.array([0, 1, 2, 0])))
        state = TrainState()
        step_model(model, state, TrainConfig(lr=1e-2))
        after = model.state_dict()
        assert state.step == 1
        assert any(not np.array_equal(before[n], after[n]) for n in before)
        assert set(state.m) == {n for n, p in model.named_parameters() if p.grad is not None}
