import math

import numpy as np
import pytest

from conftest import single_problem_batch
from l2oquad.linalg import SeededRng, gaussian_matrix, spectral_norm
from l2oquad.model import (
    L2OWeights,
    RolloutDivergenceError,
    nn_forward,
    rollout,
    two_sigmoid,
)
from l2oquad.problem import QuadraticBatch, gd_rollout, make_batch, mt_y


def random_weights(dims, seed, scale=1.0):
    rng = SeededRng(seed)
    return L2OWeights([scale * gaussian_matrix(rng, dims[i + 1], dims[i])
                       for i in range(len(dims) - 1)])


def zero_last_weights(dims, seed):
    w = random_weights(dims, seed)
    w.W[-1][:] = 0.0
    return w


def test_weights_validation():
    with pytest.raises(ValueError):
        L2OWeights([np.ones((4, 3))])  # input width must be 2
    with pytest.raises(ValueError):
        L2OWeights([np.ones((4, 2)), np.ones((2, 4))])  # output width must be 1
    bad = np.ones((1, 2))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        L2OWeights([bad])


def test_zero_last_layer_gives_unit_steps():
    w = zero_last_weights((2, 2, 8, 1), seed=4)
    P, acts, masks = nn_forward(w, np.linspace(-1, 1, 6), np.linspace(2, -2, 6))
    assert np.all(P == 1.0)
    assert len(acts) == 3 and len(masks) == 2


def test_step_sizes_strictly_inside_interval():
    w = random_weights((2, 2, 8, 1), seed=5, scale=4.0)
    rng = SeededRng(50)
    P, _, _ = nn_forward(w, rng.normals(40) * 100, rng.normals(40) * 100)
    assert P.min() > 0.0
    assert P.max() < 2.0


def test_nn_forward_hand_value():
    # identity inner layer, summing output layer, features (1, -1)
    w = L2OWeights([np.eye(2), np.array([[1.0, 1.0]])])
    P, acts, _ = nn_forward(w, np.array([1.0]), np.array([-1.0]))
    assert np.allclose(acts[1].ravel(), [1.0, 0.0])
    assert P[0] == pytest.approx(1.4621171572600098, abs=1e-12)


def test_two_sigmoid_saturation_stays_interior():
    v = two_sigmoid(np.array([1e4, 50.0, 0.0, -50.0, -1e4]))
    assert v[2] == 1.0
    assert 0.0 < v.min() and v.max() < 2.0


def test_rollout_matches_gd_at_zero_last_layer(small_batch):
    w = zero_last_weights((2, 2, 16, 1), seed=6)
    tr = rollout(w, small_batch, np.zeros(12), 100)
    gd = gd_rollout(small_batch, np.zeros(12), 100)
    worst = max(np.abs(a - b).max() for a, b in zip(tr.X, gd))
    assert worst <= 1e-12


def test_rollout_single_step_formula():
    batch = single_problem_batch([[1.0, 0.5, 0.0]], [2.0])
    w = random_weights((2, 6, 1), seed=7, scale=0.5)
    x0 = np.zeros(3)
    tr = rollout(w, batch, x0, 1)
    mty = mt_y(batch)
    P, _, _ = nn_forward(w, x0, -mty)
    assert np.allclose(tr.X[1], (P * mty) / batch.beta, atol=1e-15)


def test_trace_update_identity_exact(small_batch):
    w = random_weights((2, 2, 8, 1), seed=8, scale=2.0)
    tr = rollout(w, small_batch, np.zeros(12), 7)
    for t in range(1, 8):
        recomputed = tr.X[t - 1] - (tr.P[t - 1] * tr.Gamma[t - 1]) / tr.beta
        assert np.array_equal(recomputed, tr.X[t])


def test_iterate_norm_bound(small_batch):
    w = random_weights((2, 2, 8, 1), seed=9, scale=3.0)
    x0 = SeededRng(90).normals(12)
    tr = rollout(w, small_batch, x0, 30)
    mty = mt_y(small_batch)
    nmty = math.sqrt(mty @ mty)
    nx0 = math.sqrt(x0 @ x0)
    for t, x in enumerate(tr.X):
        assert math.sqrt(x @ x) <= nx0 + 2 * t / small_batch.beta * nmty + 1e-9


def test_inner_activation_norm_bound(small_batch):
    w = random_weights((2, 3, 8, 1), seed=10, scale=1.5)
    x0 = np.zeros(12)
    tr = rollout(w, small_batch, x0, 12)
    mty = mt_y(small_batch)
    nmty = math.sqrt(mty @ mty)
    beta = small_batch.beta
    wnorms = [spectral_norm(wl, 1e-8) for wl in w.W]
    for t in range(1, 13):
        acts = tr.G[t - 1]
        bound_scale = (1 + beta) * 0.0 + (2 * t - 1 + (2 * t - 2) / beta) * nmty
        prod = 1.0
        for l in range(1, len(acts)):
            prod *= wnorms[l - 1]
            lhs = spectral_norm(acts[l], 1e-8)
            assert lhs <= bound_scale * prod * (1 + 1e-9)


def test_trace_replay_bit_identical(small_batch):
    w = random_weights((2, 2, 8, 1), seed=11, scale=2.0)
    t1 = rollout(w, small_batch, np.zeros(12), 9)
    t2 = rollout(w, small_batch, np.zeros(12), 9)
    assert all(np.array_equal(a, b) for a, b in zip(t1.X, t2.X))
    assert all(np.array_equal(a, b) for a, b in zip(t1.P, t2.P))


def test_divergence_error_names_step(small_batch):
    w = random_weights((2, 2, 8, 1), seed=12)
    x0 = np.zeros(12)
    x0[3] = np.nan
    with np.errstate(invalid="ignore", over="ignore"):
        with pytest.raises(RolloutDivergenceError) as err:
            rollout(w, small_batch, x0, 3)
        assert err.value.step == 0

        # non-finite problem data surfaces at the first update
        Ms = small_batch.Ms.copy()
        ys = small_batch.ys.copy()
        ys[0, 0] = np.inf
        broken = QuadraticBatch(Ms=Ms, ys=ys, beta=small_batch.beta, beta0=small_batch.beta0)
        with pytest.raises(RolloutDivergenceError) as err:
            rollout(w, broken, np.zeros(12), 3)
        assert err.value.step == 1


def test_rollout_requires_positive_horizon(small_batch):
    w = random_weights((2, 2, 8, 1), seed=13)
    with pytest.raises(ValueError):
        rollout(w, small_batch, np.zeros(12), 0)


def test_contraction_probe_property():
    batch = make_batch(SeededRng(14), 2, 5, 3)
    w = zero_last_weights((2, 2, 8, 1), seed=14)
    tr = rollout(w, batch, np.zeros(10), 6)
    rng = SeededRng(140)
    from l2oquad.problem import apply_gram
    for i in range(100):
        P = tr.P[i % 6]
        v = rng.normals(10)
        out = v - apply_gram(batch, P * v) / batch.beta
        assert math.sqrt(out @ out) <= math.sqrt(v @ v) * (1 + 1e-12)
