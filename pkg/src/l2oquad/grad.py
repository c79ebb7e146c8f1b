"""Analytic backpropagation-through-time for the unrolled training loss.

The training gradient follows the detached-input convention: the state
transition Jacobian is I - (1/beta) D(P_t) M^T M, i.e. the network's
dependence on its own input features carries no gradient. backward() runs
one reverse sweep in O(T * forward) instead of materializing the
product-of-Jacobians form, applying the Kronecker-structured layer factors
as plain matrix products. finite_diff_grad() differentiates exactly the
same function numerically: it freezes the per-step network inputs at the
base-weight trajectory, which is the computation whose true gradient the
detached convention defines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import L2OWeights, RolloutTrace, nn_forward, rollout
from .problem import QuadraticBatch, apply_gram, gradient, objective


@dataclass
class WeightGradients:
    """Per-layer loss gradients, shapes matching L2OWeights.W."""

    dW: list[np.ndarray]

    def norms(self) -> list[float]:
        return [float(np.sqrt(np.sum(g * g))) for g in self.dW]


def backward(trace: RolloutTrace, weights: L2OWeights, batch: QuadraticBatch) -> WeightGradients:
    """Reverse sweep over the cached trace.

    The adjoint starts from the terminal residual pullback
    a_T = M^T (M X_T - Y), recomputed from the batch so the trace's stored
    gradients only feed the per-step seeds. At step t the seed into the
    network's output layer is -(1/beta) a_t * Gamma_{t-1} * P_t(1 - P_t/2)
    per coordinate; layer backprop through the cached ReLU masks accumulates
    dW, then a_{t-1} = (I - (1/beta) M^T M D(P_t)) a_t.
    """
    L = weights.L
    if len(trace.G) != trace.T or len(trace.X) != trace.T + 1:
        raise ValueError("trace is internally inconsistent")
    for acts, w in zip(trace.G[0], weights.W):
        if acts.shape[0] != w.shape[1]:
            raise ValueError("trace activations do not match these weights")
    beta = trace.beta
    a = gradient(batch, trace.X[-1])
    dWs = [np.zeros_like(w) for w in weights.W]
    for t in range(trace.T, 0, -1):
        P = trace.P[t - 1]
        acts = trace.G[t - 1]
        masks = trace.masks[t - 1]
        seed = (-1.0 / beta) * a * trace.Gamma[t - 1] * (P * (1.0 - 0.5 * P))
        U = seed[None, :]
        dWs[L - 1] += U @ acts[L - 1].T
        for i in range(L - 2, -1, -1):
            U = (weights.W[i + 1].T @ U) * masks[i]
            dWs[i] += U @ acts[i].T
        a = a - apply_gram(batch, P * a) / beta
    return WeightGradients(dWs)


def detached_loss(
    weights: L2OWeights,
    frozen_inputs: list[tuple[np.ndarray, np.ndarray]],
    batch: QuadraticBatch,
    X0: np.ndarray,
    beta: float,
) -> float:
    """Loss of the rollout whose network inputs are a fixed state sequence.

    Step sizes come from `weights` applied to the frozen (X, Gamma) pairs;
    the backbone states still evolve with live gradients. At the base
    weights this reproduces the ordinary rollout loss exactly.
    """
    X = np.asarray(X0, dtype=np.float64).copy()
    for xf, gf in frozen_inputs:
        P, _, _ = nn_forward(weights, xf, gf)
        X = X - (P * gradient(batch, X)) / beta
    return objective(batch, X)


def finite_diff_grad(
    weights: L2OWeights, batch: QuadraticBatch, X0: np.ndarray, T: int, h: float
) -> WeightGradients:
    """Central differences of the detached-rollout loss, every weight entry.

    Verification oracle for backward(); O(#params * T) forward evaluations,
    so keep instances small.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = rollout(weights, batch, X0, T)
    frozen = [(base.X[t], base.Gamma[t]) for t in range(T)]
    work = weights.copy()
    out = []
    for l, w in enumerate(work.W):
        dW = np.zeros_like(w)
        for i in range(w.shape[0]):
            for j in range(w.shape[1]):
                orig = w[i, j]
                w[i, j] = orig + h
                fp = detached_loss(work, frozen, batch, X0, base.beta)
                w[i, j] = orig - h
                fm = detached_loss(work, frozen, batch, X0, base.beta)
                w[i, j] = orig
                dW[i, j] = (fp - fm) / (2.0 * h)
        out.append(dW)
    return WeightGradients(out)


def mask_stability_margin(trace: RolloutTrace, weights: L2OWeights) -> float:
    """Smallest |pre-activation| across all inner layers and steps.

    Instances with a small margin can flip ReLU masks under +-h weight
    perturbations, breaking the smoothness the central-difference oracle
    relies on; callers filter on this.
    """
    margin = np.inf
    for acts in trace.G:
        for w, a in zip(weights.W[:-1], acts):
            z = np.abs(w @ a)
            if z.size:
                margin = min(margin, float(z.min()))
    return margin
