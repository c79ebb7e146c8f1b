"""SGD training of the step-size network on the unrolled loss, plus the
GD and Adam baselines used for comparison.

Training is full batch: every epoch rolls out T steps from the origin,
backpropagates through time, and takes one plain SGD step on the weights.
Divergence (non-finite or absurd loss) halts the loop gracefully with a
partial log; instability (loss blowing past 10x its running minimum) is
recorded but training continues.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .grad import backward
from .init import InitConfig, init_weights
from .linalg import SeededRng, spectral_norm
from .model import L2OWeights, RolloutDivergenceError, nn_forward, rollout
from .problem import QuadraticBatch, gd_rollout, gradient, objective
from .theory import ConditionReport, TheoryQuantities, check_conditions, quantities

DIVERGENCE_LIMIT = 1e12
INSTABILITY_FACTOR = 10.0


@dataclass
class TrainConfig:
    T: int
    epochs: int
    eta: float
    init: InitConfig
    x0: np.ndarray | None = None  # defaults to the origin
    log_every: int = 50
    record_bound_checks: bool = False
    theory_report: bool = True

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.T < 1:
            raise ValueError("T must be >= 1")


@dataclass
class EpochRow:
    epoch: int
    loss: float
    grad_norms: tuple[float, ...]
    wall_ms: float


@dataclass
class TrainLog:
    rows: list[EpochRow] = field(default_factory=list)
    beta: float = 0.0
    beta0: float = 0.0
    gd_reference: float = float("nan")
    quantities: TheoryQuantities | None = None
    conditions: ConditionReport | None = None
    diverged_epoch: int | None = None
    unstable_epoch: int | None = None

    @property
    def final_loss(self) -> float:
        return self.rows[-1].loss if self.rows else float("nan")

    @property
    def diverged(self) -> bool:
        return self.diverged_epoch is not None

    @property
    def unstable(self) -> bool:
        return self.unstable_epoch is not None


def improvement_ratio(obj_gd: float, obj_l2o: float) -> float:
    """(obj_GD - obj_L2O) / obj_GD, the headline gain over plain GD."""
    if not obj_gd > 0:
        raise ValueError(f"GD objective must be positive, got {obj_gd}")
    return (obj_gd - obj_l2o) / obj_gd


def _grad_norms(grads) -> tuple[float, ...]:
    out = []
    for g in grads.dW:
        if min(g.shape) > 1:
            out.append(spectral_norm(g, 1e-6))
        else:
            out.append(float(np.sqrt(np.sum(g * g))))
    return tuple(out)


def train(cfg: TrainConfig, batch: QuadraticBatch) -> tuple[L2OWeights, TrainLog]:
    """Run the full training loop; returns final weights and the log.

    Row k of the log holds the loss and gradient norms at weights W^k, so
    row 0 is the initialization (= the GD reference) and the last row is
    the post-training state used for the improvement ratio.
    """
    weights = init_weights(cfg.init)
    x0 = np.zeros(batch.N * batch.d) if cfg.x0 is None else np.asarray(cfg.x0, dtype=np.float64)

    log = TrainLog(beta=batch.beta, beta0=batch.beta0)
    gd_final = gd_rollout(batch, x0, cfg.T)[-1]
    log.gd_reference = objective(batch, gd_final)
    if cfg.theory_report:
        log.quantities = quantities(weights, batch, x0, cfg.T, C=cfg.init.C)
        log.conditions = check_conditions(log.quantities)

    min_loss = np.inf
    t_start = time.perf_counter()
    for k in range(cfg.epochs + 1):
        try:
            trace = rollout(weights, batch, x0, cfg.T)
            loss = objective(batch, trace.X[-1])
        except RolloutDivergenceError:
            loss = float("inf")
            trace = None
        wall = (time.perf_counter() - t_start) * 1e3
        if trace is None or not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            log.rows.append(EpochRow(k, loss, tuple(float("nan") for _ in weights.W), wall))
            log.diverged_epoch = k
            break
        if loss > INSTABILITY_FACTOR * min_loss and log.unstable_epoch is None:
            log.unstable_epoch = k
        min_loss = min(min_loss, loss)
        grads = backward(trace, weights, batch)
        log.rows.append(EpochRow(k, loss, _grad_norms(grads), wall))
        if k == cfg.epochs:
            break
        if cfg.eta != 0.0:
            for w, g in zip(weights.W, grads.dW):
                w -= cfg.eta * g
    return weights, log


def infer(
    weights: L2OWeights, batch: QuadraticBatch, X0: np.ndarray, steps: int, chunk: int = 4096
) -> list[float]:
    """Objective sequence [F(X_0) .. F(X_steps)] of a traceless rollout.

    Streams the step-size network over column chunks so arbitrarily long
    horizons and wide layers stay within memory.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    X = np.asarray(X0, dtype=np.float64).copy()
    n = X.size
    objs = [objective(batch, X)]
    g = gradient(batch, X)
    for t in range(1, steps + 1):
        if n <= chunk:
            P, _, _ = nn_forward(weights, X, g)
        else:
            P = np.empty(n)
            for lo in range(0, n, chunk):
                hi = min(lo + chunk, n)
                P[lo:hi], _, _ = nn_forward(weights, X[lo:hi], g[lo:hi])
        X = X - (P * g) / batch.beta
        if not np.all(np.isfinite(X)):
            raise RolloutDivergenceError(t, "iterate")
        g = gradient(batch, X)
        objs.append(objective(batch, X))
    return objs


def adam_infer(
    batch: QuadraticBatch,
    X0: np.ndarray,
    steps: int,
    eta: float,
    b1: float = 0.9,
    b2: float = 0.999,
    eps: float = 1e-8,
) -> list[np.ndarray]:
    """Bias-corrected Adam trajectory on the batch objective (optimizes X,
    not the network); returns [X_0 .. X_steps] for plotting."""
    if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
        raise ValueError("need 0 <= b1, b2 < 1")
    X = np.asarray(X0, dtype=np.float64).copy()
    m = np.zeros_like(X)
    v = np.zeros_like(X)
    xs = [X.copy()]
    for s in range(1, steps + 1):
        g = gradient(batch, X)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**s)
        vhat = v / (1.0 - b2**s)
        X = X - eta * mhat / (np.sqrt(vhat) + eps)
        xs.append(X.copy())
    return xs
