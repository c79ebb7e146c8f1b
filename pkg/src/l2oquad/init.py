"""Deterministic weight initialization and the expansion-coefficient heuristic.

Inner layers: Gaussian draw, QR, elementwise |R|, reconstruct W = e * Q|R|,
so every inner layer has strictly positive smallest singular value and the
whole stack scales linearly in the expansion coefficient e. The last layer
starts at exactly zero, which makes the initial rollout plain GD (unit step
sizes) and zeroes the inner-layer gradients of the first training step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import SeededRng, gaussian_matrix, qr_decompose, smallest_singular_value, spectral_norm
from .model import L2OWeights


class InitRankError(RuntimeError):
    """Initialization produced a singular inner layer even after retries."""


@dataclass(frozen=True)
class InitConfig:
    dims: tuple[int, ...]
    e: float = 1.0
    seed: int = 0
    C: tuple[float, ...] | None = None  # per-layer slack constants, default all 1

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) < 2 or dims[0] != 2 or dims[-1] != 1:
            raise ValueError(f"dims must run 2 -> ... -> 1, got {dims}")
        if any(n < 1 for n in dims):
            raise ValueError(f"all widths must be >= 1, got {dims}")
        if not self.e >= 1.0:
            raise ValueError(f"expansion coefficient must be >= 1, got {self.e}")
        C = self.C if self.C is not None else (1.0,) * (len(dims) - 1)
        C = tuple(float(c) for c in C)
        if len(C) != len(dims) - 1 or any(c <= 0 for c in C):
            raise ValueError("C must hold one positive constant per layer")
        object.__setattr__(self, "C", C)

    @property
    def L(self) -> int:
        return len(self.dims) - 1


def init_weights(cfg: InitConfig) -> L2OWeights:
    """Construct W_1..W_{L-1} = e * Q|R| from seeded Gaussian draws, W_L = 0."""
    rng = SeededRng(cfg.seed)
    Ws = []
    for l in range(cfg.L - 1):
        nout, nin = cfg.dims[l + 1], cfg.dims[l]
        for attempt in range(3):
            A = gaussian_matrix(rng, nout, nin)
            Q, R = qr_decompose(A)
            W = cfg.e * (Q @ np.abs(R))
            smax = spectral_norm(W, 1e-10)
            if smallest_singular_value(W, 1e-10) > 1e-12 * max(smax, 1.0):
                break
        else:
            raise InitRankError(f"layer {l + 1}: singular after 3 reseeded draws")
        Ws.append(W)
    Ws.append(np.zeros((1, cfg.dims[-2])))
    return L2OWeights(Ws)


def suggest_e(T: int, L: int) -> float:
    """Order-of-magnitude heuristic for the expansion coefficient.

    Max of the four growth conditions with unit leading constants:
    T^(1/(L-1)), T^((3T+6)/(TL-T-4L+6)), T^(4/(L-1)),
    T^(5/(L-1)) * L^(1/(L-1)). Not a guarantee; callers may override.
    """
    if L < 2:
        raise ValueError("need L >= 2")
    if T < 1:
        raise ValueError("need T >= 1")
    denom = T * L - T - 4 * L + 6
    if denom == 0:
        raise ValueError(f"degenerate exponent denominator T*L - T - 4L + 6 = 0 at T={T}, L={L}")
    Tf, Lf = float(T), float(L)
    inv = 1.0 / (Lf - 1.0)
    candidates = [
        Tf**inv,
        Tf ** ((3.0 * Tf + 6.0) / denom),
        Tf ** (4.0 * inv),
        Tf ** (5.0 * inv) * Lf**inv,
    ]
    return max(candidates)
