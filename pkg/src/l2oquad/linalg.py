"""Self-contained dense linear algebra on float64 numpy arrays.

Seeded Gaussian sampling, Householder QR, power-iteration spectral norm,
and smallest singular value (small-Gram Jacobi, QR + inverse iteration for
larger matrices). Everything is deterministic for a fixed seed on a fixed
platform; no numpy.linalg in this module.
"""

from __future__ import annotations

import numpy as np

_U64 = np.uint64
_MASK64 = (1 << 64) - 1
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)
_INV_2_53 = 2.0 ** -53


class SeededRng:
    """Counter-based 64-bit generator (SplitMix-style mixing).

    The k-th raw draw is mix(seed + (k+1)*golden), so blocks of draws can be
    produced with vectorized uint64 arithmetic while staying bit-identical to
    the sequential stream. Normal variates come from Box-Muller pairs.
    Single-owner: not safe to share across threads.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            z = _U64(self.seed) + idx * _GOLDEN
            z = (z ^ (z >> _U64(30))) * _MIX1
            z = (z ^ (z >> _U64(27))) * _MIX2
            return z ^ (z >> _U64(31))

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles uniform on (0, 1] (never exactly zero, safe under log)."""
        return ((self._raw(n) >> _U64(11)).astype(np.float64) + 1.0) * _INV_2_53

    def normals(self, n: int) -> np.ndarray:
        """n i.i.d. standard normal draws (Box-Muller; odd tail discarded)."""
        m = (n + 1) // 2
        u = self.uniforms(2 * m)
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = (2.0 * np.pi) * u[1::2]
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]


def gaussian_matrix(rng: SeededRng, rows: int, cols: int) -> np.ndarray:
    """rows x cols matrix of i.i.d. standard normals from the seeded stream."""
    if rows < 1 or cols < 1:
        raise ValueError(f"gaussian_matrix needs rows, cols >= 1, got {rows}x{cols}")
    return rng.normals(rows * cols).reshape(rows, cols)


def _as_matrix(a) -> np.ndarray:
    A = np.asarray(a, dtype=np.float64)
    if A.ndim != 2 or A.size == 0:
        raise ValueError(f"expected a nonempty 2-D array, got shape {A.shape}")
    return A


def _householder_r(A: np.ndarray, accumulate_q: bool) -> tuple[np.ndarray | None, np.ndarray]:
    """Householder triangularization; optionally accumulates the thin Q."""
    m, n = A.shape
    k = min(m, n)
    R = A.copy()
    vs: list[np.ndarray | None] = []
    for j in range(k):
        x = R[j:, j]
        normx = float(np.sqrt(x @ x))
        if normx == 0.0:
            vs.append(None)
            continue
        alpha = -np.copysign(normx, x[0]) if x[0] != 0.0 else -normx
        v = x.copy()
        v[0] -= alpha
        v /= np.sqrt(v @ v)
        R[j:, j:] -= np.outer(2.0 * v, v @ R[j:, j:])
        R[j, j] = alpha
        R[j + 1:, j] = 0.0
        vs.append(v)

    Q = None
    if accumulate_q:
        Q = np.zeros((m, k))
        Q[:k, :k] = np.eye(k)
        for j in range(k - 1, -1, -1):
            v = vs[j]
            if v is not None:
                Q[j:, :] -= np.outer(2.0 * v, v @ Q[j:, :])
    return Q, R[:k, :]


def qr_decompose(a) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR with the nonnegative-diagonal sign convention.

    Returns (Q, R) with Q of shape m x min(m, n) having orthonormal columns,
    R upper-triangular with diag(R) >= 0, and Q @ R == A to rounding. Rank
    deficiency is permitted (zero rows of R, Q columns from the identity).
    """
    A = _as_matrix(a)
    Q, R = _householder_r(A, accumulate_q=True)
    flip = np.diagonal(R) < 0.0
    if np.any(flip):
        R[flip, :] *= -1.0
        Q[:, flip] *= -1.0
    return Q, R


def spectral_norm(a, tol: float = 1e-10) -> float:
    """Largest singular value via power iteration on the Gram operator.

    Deterministic ramp start vector; Rayleigh-quotient estimate, at least 200
    iterations unless the relative change is already far below tol.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    A = _as_matrix(a)
    n = A.shape[1]
    v = 1.0 + np.arange(n) / max(n, 1)
    v /= np.sqrt(v @ v)
    lam_prev = np.inf
    lam = 0.0
    for it in range(5000):
        u = A @ v
        lam = float(u @ u)
        if lam == 0.0:
            return 0.0
        w = u @ A
        nw = float(np.sqrt(w @ w))
        if nw == 0.0:
            break
        v = w / nw
        rel = abs(lam - lam_prev) / lam
        if rel <= 0.01 * tol or (it >= 199 and rel <= tol):
            break
        lam_prev = lam
    return float(np.sqrt(lam))


def jacobi_eigvalsh(s, sweeps: int = 60) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending."""
    S = _as_matrix(s).copy()
    n = S.shape[0]
    if S.shape[1] != n:
        raise ValueError("jacobi_eigvalsh needs a square matrix")
    scale = float(np.sqrt(np.sum(S * S)))
    if scale == 0.0:
        return np.zeros(n)
    for _ in range(sweeps):
        off = np.sqrt(max(np.sum(S * S) - np.sum(np.diagonal(S) ** 2), 0.0))
        if off <= 1e-15 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = S[p, q]
                if abs(apq) <= 1e-18 * scale:
                    continue
                theta = (S[q, q] - S[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(1.0 + theta * theta))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                sn = t * c
                rp = S[p, :].copy()
                rq = S[q, :].copy()
                S[p, :] = c * rp - sn * rq
                S[q, :] = sn * rp + c * rq
                cp = S[:, p].copy()
                cq = S[:, q].copy()
                S[:, p] = c * cp - sn * cq
                S[:, q] = sn * cp + c * cq
                S[p, q] = 0.0
                S[q, p] = 0.0
    return np.sort(np.diagonal(S).copy())


def _solve_upper(R: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = R.shape[0]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        x[i] = (b[i] - R[i, i + 1:] @ x[i + 1:]) / R[i, i]
    return x

def _solve_lower_t(R: np.ndarray, b: np.ndarray) -> np.ndarray:
    # forward substitution with R^T (R upper-triangular)
    n = R.shape[0]
    x = np.empty(n)
    for i in range(n):
        x[i] = (b[i] - R[:i, i] @ x[:i]) / R[i, i]
    return x


_JACOBI_DIM = 64


def smallest_singular_value(a, tol: float = 1e-10) -> float:
    """Smallest singular value of a dense matrix.

    Exact small-Gram Jacobi eigensolve when min(rows, cols) <= 64; otherwise
    Householder QR followed by inverse power iteration on R^T R, falling back
    to the (slow) Jacobi path if the iteration stalls. Returns 0.0 for
    rank-deficient input.
    """
    A = _as_matrix(a)
    m, n = A.shape
    if m < n:
        A = A.T
        m, n = n, m
    if n <= _JACOBI_DIM:
        return float(np.sqrt(max(jacobi_eigvalsh(A.T @ A)[0], 0.0)))

    _, R = _householder_r(A, accumulate_q=False)
    d = np.abs(np.diagonal(R))
    dmax = float(d.max())
    if d.min() == 0.0 or d.min() <= 1e-250 * max(dmax, 1.0):
        return 0.0

    v = 1.0 + np.arange(n) / n
    v /= np.sqrt(v @ v)
    mu_prev = np.inf
    mu = 0.0
    for it in range(2000):
        y = _solve_lower_t(R, v)
        z = _solve_upper(R, y)
        if not np.all(np.isfinite(z)):
            return 0.0
        mu = float(v @ z)  # Rayleigh quotient of (R^T R)^-1
        nz = float(np.sqrt(z @ z))
        if nz == 0.0:
            break
        v = z / nz
        if mu > 0:
            est = 1.0 / np.sqrt(mu)
            if est <= 1e-13 * dmax:
                return 0.0  # numerically rank-deficient
            if abs(mu - mu_prev) <= tol * mu and it >= 2:
                return float(est)
        mu_prev = mu
    # stalled (clustered bottom spectrum): exact Jacobi is affordable only for
    # moderate sizes; beyond that the Rayleigh estimate is the best available
    if n <= 4 * _JACOBI_DIM:
        return float(np.sqrt(max(jacobi_eigvalsh(A.T @ A)[0], 0.0)))
    return float(1.0 / np.sqrt(mu)) if mu > 0 else 0.0
