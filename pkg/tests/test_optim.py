import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tidylid.errors import NonFiniteGradient, OutOfRange, ShapeMismatch
from tidylid.optim import OptimConfig, OptimState, adamw_step, cosine_lr


def test_schedule_endpoints_and_midpoint():
    cfg = OptimConfig(lr0=1e-4, total_steps=200)
    assert cosine_lr(0, cfg) == 1e-4
    assert cosine_lr(200, cfg) == 0.0
    assert cosine_lr(100, cfg) == 5e-5


def test_schedule_out_of_range():
    cfg = OptimConfig(total_steps=10)
    for step in (-1, 11):
        with pytest.raises(OutOfRange):
            cosine_lr(step, cfg)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5000))
def test_schedule_monotone(total):
    cfg = OptimConfig(total_steps=total)
    lrs = [cosine_lr(s, cfg) for s in range(0, total + 1, max(1, total // 97))]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_first_step_moves_by_about_lr():
    cfg = OptimConfig(weight_decay=0.0)
    p = {"w": np.array([1.0])}
    adamw_step(p, {"w": np.array([0.01])}, OptimState(), cfg, lr=1e-3)
    # m_hat = g, v_hat = g^2  ->  update = lr * g / (|g| + eps)
    expected = 1.0 - 1e-3 * 0.01 / (0.01 + 1e-8)
    assert p["w"][0] == pytest.approx(expected, rel=0, abs=1e-15)
    assert p["w"][0] == pytest.approx(1.0 - 1e-3, abs=1e-9)


def test_decay_only_closed_form():
    cfg = OptimConfig(weight_decay=0.05)
    p0 = np.array([1.5, -2.0, 0.25, 3.0])
    p = {"w": p0.copy()}
    state = OptimState()
    lr = 1e-2
    expected = p0.copy()
    for _ in range(3):
        adamw_step(p, {"w": np.zeros(4)}, state, cfg, lr)
        expected = expected * (1 - lr * 0.05)
        np.testing.assert_array_equal(p["w"], expected)
    assert np.all(state.m["w"] == 0) and np.all(state.v["w"] == 0)


def test_bias_corrected_second_step():
    cfg = OptimConfig(weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8)
    p = {"w": np.array([0.0])}
    state = OptimState()
    adamw_step(p, {"w": np.array([1.0])}, state, cfg, 0.1)
    adamw_step(p, {"w": np.array([3.0])}, state, cfg, 0.1)
    m = 0.9 * 0.1 + 0.1 * 3.0
    v = 0.999 * 0.001 + 0.001 * 9.0
    step2 = (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert p["w"][0] == pytest.approx(-0.1 * (1 / (1 + 1e-8)) - 0.1 * step2, abs=1e-12)


def test_determinism(rng):
    cfg = OptimConfig(weight_decay=1e-2)
    grads = [rng.normal(size=(3, 2)) for _ in range(5)]

    def run():
        p, s = {"w": np.ones((3, 2))}, OptimState()
        for g in grads:
            adamw_step(p, {"w": g}, s, cfg, 1e-3)
        return p["w"]

    assert run().tobytes() == run().tobytes()


def test_errors():
    cfg = OptimConfig()
    with pytest.raises(ShapeMismatch):
        adamw_step({"w": np.ones(2)}, {"w": np.ones(3)}, OptimState(), cfg, 1e-3)
    with pytest.raises(NonFiniteGradient):
        adamw_step({"w": np.ones(2)}, {"w": np.array([1.0, np.nan])}, OptimState(), cfg, 1e-3)
