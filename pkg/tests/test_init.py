import math

import numpy as np
import pytest

from l2oquad.grad import backward
from l2oquad.init import InitConfig, init_weights, suggest_e
from l2oquad.linalg import SeededRng, smallest_singular_value
from l2oquad.model import nn_forward, rollout
from l2oquad.problem import gd_rollout, make_batch


def test_config_validation():
    with pytest.raises(ValueError):
        InitConfig(dims=(3, 4, 1))
    with pytest.raises(ValueError):
        InitConfig(dims=(2, 4, 2))
    with pytest.raises(ValueError):
        InitConfig(dims=(2, 4, 1), e=0.5)
    with pytest.raises(ValueError):
        InitConfig(dims=(2, 4, 1), C=(1.0,))


def test_last_layer_exactly_zero():
    w = init_weights(InitConfig(dims=(2, 16, 1), seed=11))
    assert np.all(w.W[-1] == 0.0)


def test_init_gives_unit_steps_and_gd_rollout():
    batch = make_batch(SeededRng(2), 2, 5, 3)
    w = init_weights(InitConfig(dims=(2, 2, 32, 1), seed=3, e=7.0))
    P, _, _ = nn_forward(w, np.zeros(10), np.ones(10))
    assert np.all(P == 1.0)
    tr = rollout(w, batch, np.zeros(10), 40)
    gd = gd_rollout(batch, np.zeros(10), 40)
    assert max(np.abs(a - b).max() for a, b in zip(tr.X, gd)) <= 1e-12


def test_expansion_scales_inner_layers_exactly():
    w1 = init_weights(InitConfig(dims=(2, 16, 1), seed=11, e=1.0))
    w2 = init_weights(InitConfig(dims=(2, 16, 1), seed=11, e=2.0))
    assert np.array_equal(w2.W[0], 2.0 * w1.W[0])
    assert np.array_equal(w2.W[1], w1.W[1])  # zero last layer unaffected


def test_inner_layers_have_positive_sigma_min():
    w = init_weights(InitConfig(dims=(2, 16, 1), seed=11))
    assert smallest_singular_value(w.W[0], 1e-10) > 0
    oracle = np.linalg.svd(w.W[0], compute_uv=False)[-1]
    assert oracle > 0
    assert smallest_singular_value(w.W[0], 1e-10) == pytest.approx(oracle, rel=1e-6)


def test_deterministic_bit_for_bit():
    cfg = InitConfig(dims=(2, 4, 8, 1), seed=21, e=3.0)
    a = init_weights(cfg)
    b = init_weights(cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.W, b.W))


def test_zero_inner_gradients_at_init():
    batch = make_batch(SeededRng(5), 2, 5, 3)
    w = init_weights(InitConfig(dims=(2, 2, 16, 1), seed=4, e=5.0))
    tr = rollout(w, batch, np.zeros(10), 8)
    g = backward(tr, w, batch)
    assert all(np.all(dw == 0.0) for dw in g.dW[:-1])


def test_alpha0_nondecreasing_in_e():
    batch = make_batch(SeededRng(2), 2, 5, 3)
    vals = []
    for e in (1.0, 2.0, 4.0, 8.0):
        w = init_weights(InitConfig(dims=(2, 8, 16, 1), seed=2, e=e))
        tr = rollout(w, batch, np.zeros(10), 6)
        vals.append(smallest_singular_value(tr.G[-1][-1], 1e-10))
    assert vals[0] > 0
    assert all(vals[i + 1] >= vals[i] for i in range(3))


def test_suggest_e_reference_values():
    assert suggest_e(1, 3) == pytest.approx(math.sqrt(3.0), rel=1e-12)
    expected = 20.0**2.5 * math.sqrt(3.0)
    assert suggest_e(20, 3) == pytest.approx(expected, rel=1e-12)
    assert suggest_e(6, 2) == pytest.approx(6.0**6, rel=1e-12)


def test_suggest_e_degenerate_denominator():
    # T*L - T - 4L + 6 = 0 at T=2, L=2
    with pytest.raises(ValueError):
        suggest_e(2, 2)
    with pytest.raises(ValueError):
        suggest_e(0, 3)
    with pytest.raises(ValueError):
        suggest_e(5, 1)
