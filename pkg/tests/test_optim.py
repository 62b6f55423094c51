import numpy as np
import pytest

from vidtext.optim import AdamWState, optimizer_step
from vidtext.tensor import Tensor


def test_zero_gradient_without_decay_leaves_parameter():
    p = {"w": Tensor(np.arange(6.0).reshape(2, 3))}
    before = p["w"].data.copy()
    optimizer_step(p, {"w": np.zeros((2, 3), dtype=np.float32)}, AdamWState(weight_decay=0.0))
    np.testing.assert_array_equal(p["w"].data, before)


def test_first_step_closed_form(f64):
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=(4, 5))
    g = rng.normal(size=(4, 5))
    p = {"w": Tensor(w0)}
    state = AdamWState(lr=1e-2, weight_decay=0.0)
    optimizer_step(p, {"w": g}, state)
    # bias-corrected moments on step 1 are exactly g and g**2
    expected = w0 - 1e-2 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p["w"].data, expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(p["w"].data - w0, -1e-2 * np.sign(g), atol=1e-9)


def test_decoupled_weight_decay(f64):
    p = {"w": Tensor(np.full(3, 2.0))}
    optimizer_step(p, {"w": np.zeros(3)}, AdamWState(lr=0.1, weight_decay=0.5))
    np.testing.assert_allclose(p["w"].data, 2.0 * (1 - 0.05))


def test_deterministic_ten_steps():
    def run():
        rng = np.random.default_rng(3)
        p = {"a": Tensor(rng.normal(size=(3, 3))), "b": Tensor(rng.normal(size=3))}
        state = AdamWState()
        for i in range(10):
            g = {k: np.sin(v.data * (i + 1)) for k, v in p.items()}
            optimizer_step(p, g, state)
        return b"".join(v.data.tobytes() for v in p.values()), state.step

    assert run() == run()
    assert run()[1] == 10


def test_shape_mismatch_raises():
    p = {"w": Tensor(np.ones((2, 2)))}
    with pytest.raises(ValueError, match="gradient shape"):
        optimizer_step(p, {"w": np.ones(3)}, AdamWState())
