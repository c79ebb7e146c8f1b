"""Coordinate-wise step-size network and the unrolled solver rollout.

One shared L-layer ReLU network maps each coordinate's (x, grad) pair to a
step size in (0, 2) through a doubled sigmoid; the backbone update is
X_t = X_{t-1} - (1/beta) P_t * grad F(X_{t-1}). The rollout caches every
intermediate (states, step sizes, layer activations, ReLU masks, gradients)
so the backward pass can run as a single reverse sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .problem import QuadraticBatch, gradient

_P_FLOOR = float(np.nextafter(0.0, 1.0))
_P_CEIL = float(np.nextafter(2.0, 0.0))


class RolloutDivergenceError(RuntimeError):
    """Non-finite value produced inside a rollout; carries the failing step."""

    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at rollout step {step}")
        self.step = step


@dataclass
class L2OWeights:
    """Layer matrices W_1..W_L; W[l] has shape dims[l+1] x dims[l]."""

    W: list[np.ndarray]

    def __post_init__(self):
        self.W = [np.asarray(w, dtype=np.float64) for w in self.W]
        dims = self.dims
        if dims[0] != 2:
            raise ValueError(f"input width must be 2 (features are [x, grad]), got {dims[0]}")
        if dims[-1] != 1:
            raise ValueError(f"output width must be 1, got {dims[-1]}")
        for i, w in enumerate(self.W[:-1]):
            if self.W[i + 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i + 1}/{i + 2} shape mismatch: {w.shape} -> {self.W[i + 1].shape}")
        for i, w in enumerate(self.W):
            if not np.all(np.isfinite(w)):
                raise ValueError(f"layer {i + 1} has non-finite entries")

    @property
    def L(self) -> int:
        return len(self.W)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.W[0].shape[1],) + tuple(w.shape[0] for w in self.W)

    def copy(self) -> "L2OWeights":
        return L2OWeights([w.copy() for w in self.W])


@dataclass
class RolloutTrace:
    """Everything the backward sweep needs, exactly as computed forward.

    X[t] = X[t-1] - (1/beta) * P[t-1] * Gamma[t-1] holds entry-for-entry as
    stored; G[t-1] is the list [G_0 .. G_{L-1}] of activation matrices
    (n_l x N*d) at step t, masks[t-1] the corresponding ReLU masks.
    """

    T: int
    beta: float
    X: list[np.ndarray]
    P: list[np.ndarray]
    Gamma: list[np.ndarray]
    G: list[list[np.ndarray]] = field(repr=False)
    masks: list[list[np.ndarray]] = field(repr=False)


def two_sigmoid(z: np.ndarray) -> np.ndarray:
    """2*sigmoid(z), computed branch-stably and clipped into the open (0, 2)."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 2.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = 2.0 * ez / (1.0 + ez)
    return np.clip(out, _P_FLOOR, _P_CEIL)


def nn_forward(
    weights: L2OWeights, X: np.ndarray, Gamma: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """One pass of the step-size network over all coordinates at once.

    Feature matrix G_0 stacks X and Gamma as rows (2 x n); inner layers apply
    ReLU with the tie-at-zero counted active; the last layer emits
    P = 2*sigmoid(W_L G_{L-1}) as a length-n vector. Returns (P, activations
    [G_0..G_{L-1}], masks [D_1..D_{L-1}]) for caching.
    """
    X = np.asarray(X, dtype=np.float64)
    Gamma = np.asarray(Gamma, dtype=np.float64)
    if X.shape != Gamma.shape or X.ndim != 1:
        raise ValueError(f"feature shapes disagree: {X.shape} vs {Gamma.shape}")
    G = np.vstack((X, Gamma))
    acts = [G]
    masks = []
    for w in weights.W[:-1]:
        Z = w @ G
        D = Z >= 0.0
        G = np.where(D, Z, 0.0)
        acts.append(G)
        masks.append(D)
    P = two_sigmoid(weights.W[-1] @ G).ravel()
    return P, acts, masks


def rollout(weights: L2OWeights, batch: QuadraticBatch, X0: np.ndarray, T: int) -> RolloutTrace:
    """Unroll T learned-step-size updates from X0, caching the full trace."""
    if T < 1:
        raise ValueError("rollout needs T >= 1")
    X = np.asarray(X0, dtype=np.float64).copy()
    if not np.all(np.isfinite(X)):
        raise RolloutDivergenceError(0, "initial point")
    beta = batch.beta
    xs = [X.copy()]
    gammas = [gradient(batch, X)]
    ps: list[np.ndarray] = []
    acts_all: list[list[np.ndarray]] = []
    masks_all: list[list[np.ndarray]] = []
    for t in range(1, T + 1):
        P, acts, masks = nn_forward(weights, xs[-1], gammas[-1])
        X = xs[-1] - (P * gammas[-1]) / beta
        if not np.all(np.isfinite(X)):
            raise RolloutDivergenceError(t, "iterate")
        g = gradient(batch, X)
        if not np.all(np.isfinite(g)):
            raise RolloutDivergenceError(t, "gradient")
        xs.append(X.copy())
        gammas.append(g)
        ps.append(P)
        acts_all.append(acts)
        masks_all.append(masks)
    return RolloutTrace(T=T, beta=beta, X=xs, P=ps, Gamma=gammas, G=acts_all, masks=masks_all)
