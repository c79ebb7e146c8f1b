"""Batched quadratic least-squares instances and the plain GD baseline.

A batch concatenates N independent problems min_x 0.5*||M_i x - y_i||^2 with
shared dimensions d > b. The batch objective is the sum over problems; its
smoothness constant beta = max_i ||M_i^T M_i||_2 and full-row-rank margin
beta0 = min_i lambda_min(M_i M_i^T) are computed once at construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import SeededRng, gaussian_matrix, qr_decompose, smallest_singular_value, spectral_norm


class RankDeficientError(ValueError):
    """A problem matrix lost full row rank (singular M M^T)."""


@dataclass(frozen=True)
class QuadraticProblem:
    M: np.ndarray  # b x d
    y: np.ndarray  # b

    @property
    def b(self) -> int:
        return self.M.shape[0]

    @property
    def d(self) -> int:
        return self.M.shape[1]


@dataclass(frozen=True)
class QuadraticBatch:
    """N stacked problems with cached smoothness constants."""

    Ms: np.ndarray  # N x b x d
    ys: np.ndarray  # N x b
    beta: float
    beta0: float
    seed: int | None = None
    sigmas: tuple = field(default=(), repr=False)  # per-problem (sigma_max, sigma_min) of M_i

    @property
    def N(self) -> int:
        return self.Ms.shape[0]

    @property
    def b(self) -> int:
        return self.Ms.shape[1]

    @property
    def d(self) -> int:
        return self.Ms.shape[2]

    @property
    def problems(self) -> list[QuadraticProblem]:
        return [QuadraticProblem(self.Ms[i], self.ys[i]) for i in range(self.N)]

    @classmethod
    def from_arrays(cls, Ms, ys, seed: int | None = None, tol: float = 1e-10) -> "QuadraticBatch":
        Ms = np.asarray(Ms, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        if Ms.ndim != 3 or ys.ndim != 2 or Ms.shape[:2] != ys.shape:
            raise ValueError(f"bad batch shapes: Ms {Ms.shape}, ys {ys.shape}")
        b, d = Ms.shape[1], Ms.shape[2]
        if not d > b >= 1:
            raise ValueError(f"need d > b >= 1, got d={d}, b={b}")
        sigmas = []
        for i in range(Ms.shape[0]):
            smax = spectral_norm(Ms[i], tol)
            smin = smallest_singular_value(Ms[i], tol)
            if smin <= 1e-12 * max(smax, 1.0):
                raise RankDeficientError(f"problem {i}: M is row-rank-deficient")
            sigmas.append((smax, smin))
        beta = max(s * s for s, _ in sigmas)
        beta0 = min(s * s for _, s in sigmas)
        return cls(Ms=Ms, ys=ys, beta=beta, beta0=beta0, seed=seed, sigmas=tuple(sigmas))


def make_batch(rng: SeededRng, N: int, d: int, b: int, tol: float = 1e-10) -> QuadraticBatch:
    """Sample N problems with standard-normal M_i (b x d) and y_i (b).

    Row-rank-deficient draws (probability ~0) are retried with the advanced
    stream. Requires d > b >= 1 and N >= 1.
    """
    if not d > b >= 1:
        raise ValueError(f"need d > b >= 1, got d={d}, b={b}")
    if N < 1:
        raise ValueError(f"need N >= 1, got N={N}")
    Ms = np.empty((N, b, d))
    ys = np.empty((N, b))
    sigmas = []
    for i in range(N):
        for _ in range(4):
            M = gaussian_matrix(rng, b, d)
            y = gaussian_matrix(rng, b, 1).ravel()
            smax = spectral_norm(M, tol)
            smin = smallest_singular_value(M, tol)
            if smin > 1e-12 * smax:
                break
        else:
            raise RankDeficientError(f"problem {i}: repeated rank-deficient draws")
        Ms[i], ys[i] = M, y
        sigmas.append((smax, smin))
    beta = max(s * s for s, _ in sigmas)
    beta0 = min(s * s for _, s in sigmas)
    return QuadraticBatch(Ms=Ms, ys=ys, beta=beta, beta0=beta0, seed=rng.seed, sigmas=tuple(sigmas))


def _blocks(batch: QuadraticBatch, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape != (batch.N * batch.d,):
        raise ValueError(f"point has length {X.shape}, batch needs {batch.N * batch.d}")
    return X.reshape(batch.N, batch.d)


def residual(batch: QuadraticBatch, X: np.ndarray) -> np.ndarray:
    """Stacked residual M X - Y, shape N x b."""
    return np.einsum("nbd,nd->nb", batch.Ms, _blocks(batch, X)) - batch.ys


def objective(batch: QuadraticBatch, X: np.ndarray) -> float:
    """0.5 * sum_i ||M_i x_i - y_i||^2."""
    R = residual(batch, X)
    return 0.5 * float(np.sum(R * R))


def gradient(batch: QuadraticBatch, X: np.ndarray) -> np.ndarray:
    """Per-block M_i^T (M_i x_i - y_i), concatenated."""
    R = residual(batch, X)
    return np.einsum("nbd,nb->nd", batch.Ms, R).ravel()


def apply_gram(batch: QuadraticBatch, v: np.ndarray) -> np.ndarray:
    """Block-diagonal M^T M applied to a batch point."""
    Vr = _blocks(batch, v)
    Mv = np.einsum("nbd,nd->nb", batch.Ms, Vr)
    return np.einsum("nbd,nb->nd", batch.Ms, Mv).ravel()


def mt_y(batch: QuadraticBatch) -> np.ndarray:
    """Concatenated M^T Y."""
    return np.einsum("nbd,nb->nd", batch.Ms, batch.ys).ravel()


def least_norm_solution(batch: QuadraticBatch) -> np.ndarray:
    """Per block x* = M^T (M M^T)^-1 y via QR of M^T (metrics only)."""
    out = np.empty((batch.N, batch.d))
    for i in range(batch.N):
        Q, R = qr_decompose(batch.Ms[i].T)  # M^T = Q R, so M = R^T Q^T
        diag = np.abs(np.diagonal(R))
        if diag.min() <= 1e-13 * max(diag.max(), 1.0):
            raise RankDeficientError(f"problem {i}: singular M M^T")
        w = _forward_solve_rt(R, batch.ys[i])
        out[i] = Q @ w
    return out.ravel()


def _forward_solve_rt(R: np.ndarray, b: np.ndarray) -> np.ndarray:
    # solve R^T w = b with R upper-triangular
    n = R.shape[0]
    w = np.empty(n)
    for i in range(n):
        w[i] = (b[i] - R[:i, i] @ w[:i]) / R[i, i]
    return w


def gd_rollout(batch: QuadraticBatch, X0: np.ndarray, T: int) -> list[np.ndarray]:
    """T plain GD steps with the fixed step 1/beta; returns [X_0, ..., X_T]."""
    if T < 0:
        raise ValueError("T must be >= 0")
    X = np.asarray(X0, dtype=np.float64).copy()
    xs = [X.copy()]
    for _ in range(T):
        X = X - gradient(batch, X) / batch.beta
        xs.append(X.copy())
    return xs
