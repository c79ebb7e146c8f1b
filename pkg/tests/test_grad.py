import numpy as np
import pytest

from conftest import single_problem_batch
from l2oquad.grad import backward, finite_diff_grad, mask_stability_margin
from l2oquad.linalg import SeededRng, gaussian_matrix, spectral_norm
from l2oquad.model import L2OWeights, nn_forward, rollout
from l2oquad.problem import QuadraticBatch, make_batch, objective
from test_model import random_weights, zero_last_weights


def max_rel_err(analytic, numeric, floor=1e-9):
    # differences at or below the absolute floor do not count as error
    worst = 0.0
    for a, f in zip(analytic.dW, numeric.dW):
        diff = np.abs(a - f)
        denom = np.maximum(np.abs(a), np.abs(f))
        rel = np.where(diff <= floor, 0.0, diff / np.maximum(denom, floor))
        worst = max(worst, float(rel.max()))
    return worst


def test_zero_last_layer_zeroes_inner_gradients():
    for dims, seed in [((2, 8, 1), 1), ((2, 2, 16, 1), 2), ((2, 4, 4, 8, 1), 3)]:
        batch = make_batch(SeededRng(20 + seed), 2, 5, 3)
        w = zero_last_weights(dims, seed)
        tr = rollout(w, batch, np.zeros(10), 6)
        g = backward(tr, w, batch)
        for inner in g.dW[:-1]:
            assert np.all(inner == 0.0)
        assert np.abs(g.dW[-1]).max() > 0.0


def test_matches_finite_differences_on_reference_instance():
    # d=4, b=2, N=2, widths [2,8,1], T=5
    rng = SeededRng(9)
    batch = make_batch(rng, 2, 4, 2)
    w = L2OWeights([gaussian_matrix(rng, 8, 2), gaussian_matrix(rng, 1, 8)])
    x0 = np.zeros(8)
    tr = rollout(w, batch, x0, 5)
    analytic = backward(tr, w, batch)
    numeric = finite_diff_grad(w, batch, x0, 5, 1e-5)
    assert max_rel_err(analytic, numeric) < 1e-5


def test_three_layer_finite_difference_agreement():
    rng = SeededRng(9)
    batch = make_batch(rng, 2, 4, 2)
    w = random_weights((2, 2, 8, 1), seed=31, scale=0.7)
    x0 = np.zeros(8)
    tr = rollout(w, batch, x0, 5)
    analytic = backward(tr, w, batch)
    numeric = finite_diff_grad(w, batch, x0, 5, 1e-5)
    assert max_rel_err(analytic, numeric) < 1e-5


def test_halving_h_shrinks_error():
    rng = SeededRng(9)
    batch = make_batch(rng, 2, 4, 2)
    w = random_weights((2, 8, 1), seed=47, scale=0.6)
    x0 = SeededRng(47 * 7 + 1).normals(8) * 0.5
    tr = rollout(w, batch, x0, 4)
    assert mask_stability_margin(tr, w) > 1e-2  # smooth instance
    analytic = backward(tr, w, batch)
    err_coarse = max_rel_err(analytic, finite_diff_grad(w, batch, x0, 4, 1e-4), floor=1e-11)
    err_fine = max_rel_err(analytic, finite_diff_grad(w, batch, x0, 4, 5e-5), floor=1e-11)
    assert err_fine < err_coarse


def test_single_step_closed_form_last_layer():
    # T=1, N=1, d=2: dF/dW_L[0,j] computed symbolically from
    # F = 0.5 ||M X1 - y||^2, X1 = X0 - (1/beta) P1 * Gamma0,
    # P1 = 2 sigmoid(W_L relu(W1 [X0; Gamma0])).
    batch = single_problem_batch([[1.5, 0.4]], [0.7])
    w = random_weights((2, 6, 1), seed=33, scale=0.8)
    x0 = np.array([0.3, -0.2])
    tr = rollout(w, batch, x0, 1)
    g = backward(tr, w, batch)

    M = batch.Ms[0]
    beta = batch.beta
    gamma0 = M.T @ (M @ x0 - batch.ys[0])
    G = np.maximum(w.W[0] @ np.vstack([x0, gamma0]), 0.0)  # 6 x 2
    z = (w.W[1] @ G).ravel()
    P = 2.0 / (1.0 + np.exp(-z))
    x1 = x0 - (P * gamma0) / beta
    gamma1 = M.T @ (M @ x1 - batch.ys[0])
    dP = P * (1.0 - P / 2.0)
    hand = np.empty((1, 6))
    for j in range(6):
        hand[0, j] = float(np.sum((-1.0 / beta) * gamma1 * gamma0 * dP * G[j, :]))
    assert np.allclose(g.dW[-1], hand, rtol=1e-12, atol=1e-14)
    numeric = finite_diff_grad(w, batch, x0, 1, 1e-5)
    assert np.allclose(numeric.dW[-1], hand, rtol=1e-6, atol=1e-9)


def test_gradient_scales_with_terminal_residual():
    # doubling Y - M X_T at a fixed trace doubles the pullback and all dW
    batch = make_batch(SeededRng(34), 2, 5, 3)
    w = random_weights((2, 2, 8, 1), seed=34, scale=0.8)
    tr = rollout(w, batch, np.zeros(10), 1)
    g1 = backward(tr, w, batch)
    XT = tr.X[-1].reshape(2, 5)
    ys2 = np.stack([2.0 * batch.ys[i] - batch.Ms[i] @ XT[i] for i in range(2)])
    shifted = QuadraticBatch(Ms=batch.Ms, ys=ys2, beta=batch.beta, beta0=batch.beta0)
    g2 = backward(tr, w, shifted)
    for a, b in zip(g1.dW, g2.dW):
        assert np.allclose(b, 2.0 * a, rtol=1e-12, atol=1e-15)


def test_gradient_norm_bound():
    # Lemma-style ceiling with lambda_l = ||W_l^0||_2 + 1, weights inside the ball
    batch = make_batch(SeededRng(35), 2, 5, 3)
    w0 = zero_last_weights((2, 2, 8, 1), seed=35)
    rng = SeededRng(350)
    w = L2OWeights([wl + 0.3 * gaussian_matrix(rng, *wl.shape) for wl in w0.W])
    lam = [spectral_norm(wl, 1e-8) + 1.0 for wl in w0.W]
    for wl, l in zip(w.W, lam):
        assert spectral_norm(wl, 1e-8) <= l
    T = 6
    tr = rollout(w, batch, np.zeros(10), T)
    g = backward(tr, w, batch)
    from l2oquad.problem import mt_y
    beta = batch.beta
    nmty = float(np.sqrt(mt_y(batch) @ mt_y(batch)))
    lam_sum = 0.0
    for t in range(1, T + 1):
        lam_sum += (2 * t - 1) * (beta * (2 * t - 1) + 2 * t - 2) / beta**2 * nmty**2
    theta = np.prod(lam)
    res = np.sqrt(2.0 * objective(batch, tr.X[-1]))
    for l, dw in enumerate(g.dW):
        lhs = spectral_norm(dw, 1e-8) if min(dw.shape) > 1 else float(np.sqrt(np.sum(dw * dw)))
        assert lhs <= np.sqrt(beta) * theta * lam_sum / (2 * lam[l]) * res * (1 + 1e-9)


def test_oracle_agreement_random_small_sweep():
    # short version of the acceptance sweep: mask-stable draws only
    accepted = 0
    attempt = 0
    while accepted < 5 and attempt < 40:
        attempt += 1
        rng = SeededRng(1000 + attempt)
        batch = make_batch(rng, 1, 6, 3)
        w = random_weights((2, 8, 1), seed=2000 + attempt, scale=0.6)
        tr = rollout(w, batch, np.zeros(6), 4)
        if mask_stability_margin(tr, w) < 1e-3:
            continue
        accepted += 1
        analytic = backward(tr, w, batch)
        numeric = finite_diff_grad(w, batch, np.zeros(6), 4, 1e-5)
        assert max_rel_err(analytic, numeric) < 1e-5
    assert accepted == 5


def test_backward_rejects_mismatched_trace():
    batch = make_batch(SeededRng(36), 2, 5, 3)
    w = random_weights((2, 2, 8, 1), seed=36)
    tr = rollout(w, batch, np.zeros(10), 3)
    other = random_weights((2, 4, 1), seed=37)
    with pytest.raises(ValueError):
        backward(tr, other, batch)


def test_finite_diff_rejects_bad_step():
    batch = make_batch(SeededRng(38), 1, 4, 2)
    w = random_weights((2, 4, 1), seed=38)
    with pytest.raises(ValueError):
        finite_diff_grad(w, batch, np.zeros(4), 2, 0.0)
