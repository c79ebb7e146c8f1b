"""Convergence-certificate arithmetic for the unrolled learned optimizer.

Evaluates the full family of initialization-time constants (layer norm
bounds, their products and sums, the step polynomials Phi_j / Lambda_j, the
compounded drift terms delta_1^t / delta_2, the sigmoid-curvature constant
delta_4, and the penultimate-activation margin alpha_0), the four
sufficient conditions on alpha_0, the two learning-rate ceilings, the
predicted linear rate, the GD-aligned bound, and runtime verification of
the bound lemmas against observed rollouts and gradients.

Everything is tracked in both linear and log space: the compounded products
overflow float64 well inside desk-scale configurations, and condition
comparisons fall back to logs whenever a side is not representable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import SeededRng, smallest_singular_value, spectral_norm
from .model import L2OWeights, RolloutTrace, nn_forward
from .problem import QuadraticBatch, apply_gram, gradient, mt_y, objective

_LINEAR_LIMIT = 1e300


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


class RateBoundError(ValueError):
    """Learning rate at or above the admissible ceiling; carries the base."""

    def __init__(self, eta: float, base: float):
        super().__init__(f"eta={eta:.6g} makes the rate base {base:.6g}, outside (0, 1]")
        self.base = base


@dataclass
class TheoryQuantities:
    """Eq.-level constants evaluated at an initialization checkpoint.

    Arrays are 1-indexed by step in spirit: Phi[j-1] is the j-th value.
    log_* fields always hold exact log-space values; the linear fields are
    inf when the value exceeds float64 range (overflow flag set).
    """

    T: int
    L: int
    beta: float
    beta0: float
    norm_X0: float
    norm_Y: float
    norm_MtY: float
    C: tuple[float, ...]
    lambda_bar: np.ndarray  # per layer, ||W_l^0||_2 + C_l
    Theta_L: float
    Theta_Lm1: float
    Phi: np.ndarray  # j = 1..T
    Lambda: np.ndarray  # j = 1..T
    S_Lambda_T: float
    S_Lambda_Tm1: float
    S_lambda_L: float
    zeta1: float
    zeta2: float
    delta1: np.ndarray  # t = 1..T, inf where overflowed
    log_delta1: np.ndarray
    delta2: float
    log_delta2: float
    delta3: float
    delta4: float  # may underflow to 0.0; log_delta4 is exact
    log_delta4: float
    alpha0: float
    overflow: bool = False

    def as_text(self) -> str:
        """Flat key=value block for report sidecars."""
        lines = [
            f"T={self.T}",
            f"L={self.L}",
            f"beta={self.beta:.17g}",
            f"beta0={self.beta0:.17g}",
            f"norm_X0={self.norm_X0:.17g}",
            f"norm_Y={self.norm_Y:.17g}",
            f"norm_MtY={self.norm_MtY:.17g}",
            f"lambda_bar={','.join(format(v, '.17g') for v in self.lambda_bar)}",
            f"Theta_L={self.Theta_L:.17g}",
            f"Theta_Lm1={self.Theta_Lm1:.17g}",
            f"S_Lambda_T={self.S_Lambda_T:.17g}",
            f"S_lambda_L={self.S_lambda_L:.17g}",
            f"zeta1={self.zeta1:.17g}",
            f"zeta2={self.zeta2:.17g}",
            f"delta1_T={self.delta1[-1]:.17g}",
            f"log_delta1_T={self.log_delta1[-1]:.17g}",
            f"delta2={self.delta2:.17g}",
            f"log_delta2={self.log_delta2:.17g}",
            f"delta3={self.delta3:.17g}",
            f"delta4={self.delta4:.17g}",
            f"log_delta4={self.log_delta4:.17g}",
            f"alpha0={self.alpha0:.17g}",
            f"overflow={'1' if self.overflow else '0'}",
        ]
        return "\n".join(lines)


def penultimate_activation(
    weights: L2OWeights, batch: QuadraticBatch, X0: np.ndarray, T: int
) -> np.ndarray:
    """G_{L-1,T}: last inner activation at step T, via a lean (traceless) run."""
    X = np.asarray(X0, dtype=np.float64).copy()
    g = gradient(batch, X)
    for _ in range(T - 1):
        P, _, _ = nn_forward(weights, X, g)
        X = X - (P * g) / batch.beta
        g = gradient(batch, X)
    _, acts, _ = nn_forward(weights, X, g)
    return acts[-1]


def quantities(
    weights0: L2OWeights,
    batch: QuadraticBatch,
    X0: np.ndarray,
    T: int,
    C: tuple[float, ...] | None = None,
    sigma_tol: float = 1e-8,
) -> TheoryQuantities:
    """Evaluate every initialization constant for the given horizon.

    weights0 is meant to be an init-time checkpoint (zero last layer);
    alpha_0 is the smallest singular value of the penultimate activation
    matrix produced by rolling those weights out T steps from X0.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    L = weights0.L
    C = tuple(float(c) for c in (C if C is not None else (1.0,) * L))
    if len(C) != L or any(c <= 0 for c in C):
        raise ValueError("C must hold one positive constant per layer")
    beta, beta0 = batch.beta, batch.beta0
    X0 = np.asarray(X0, dtype=np.float64)
    nx0 = float(np.sqrt(X0 @ X0))
    Yc = batch.ys.ravel()
    ny = float(np.sqrt(Yc @ Yc))
    mty = mt_y(batch)
    nmty = float(np.sqrt(mty @ mty))

    lam = np.array([spectral_norm(w, 1e-10) + c for w, c in zip(weights0.W, C)])
    theta = float(np.prod(lam))
    theta_m1 = float(np.prod(lam[:-1])) if L > 1 else 1.0

    j = np.arange(1, T + 1, dtype=np.float64)
    Phi = nx0 + (2.0 * j - 1.0) / beta * nmty
    Lam = (
        (1.0 + beta) * nx0 * nx0
        + ((4.0 * j - 3.0) * (1.0 + beta) + beta) / beta * nx0 * nmty
        + (2.0 * j - 1.0) * (beta * (2.0 * j - 1.0) + (2.0 * j - 2.0)) / (beta * beta) * nmty * nmty
    )
    S_Lam = float(np.sum(Lam))
    S_Lam_m1 = float(np.sum(Lam[:-1])) if T > 1 else 0.0
    S_lam = float(np.sum(lam**-2.0))
    zeta1 = math.sqrt(beta) * nx0 + (2.0 * T + 1.0) * ny
    zeta2 = nx0 + (2.0 * T - 2.0) / beta * nmty
    delta3 = (1.0 + beta) * nx0 + (2.0 * T - 1.0 + (2.0 * T - 2.0) / beta) * nmty

    # delta_1^t recurrence: delta_1^t = (1 + c Phi_t) delta_1^{t-1} + Lambda_t
    # with c = (1+beta)/2 * Theta_L, carried in linear and log form together.
    cfac = 0.5 * (1.0 + beta) * theta
    d1 = np.empty(T)
    logd1 = np.empty(T)
    overflow = False
    lin, lg = 0.0, -math.inf
    for t in range(1, T + 1):
        factor = 1.0 + cfac * Phi[t - 1]
        lg = np.logaddexp(lg + _log(factor), _log(Lam[t - 1]))
        lin = lin * factor + Lam[t - 1]
        if not math.isfinite(lin) or lin > _LINEAR_LIMIT:
            lin = math.inf
            overflow = True
        d1[t - 1] = lin
        logd1[t - 1] = lg
    if T >= 2:
        delta2, log_delta2 = float(d1[T - 2]), float(logd1[T - 2])
    else:
        delta2, log_delta2 = 0.0, -math.inf

    z = delta3 * theta
    # log(sigma(z) (1 - sigma(z))) = -(softplus(z) + softplus(-z))
    log_d4 = -(np.logaddexp(0.0, z) + np.logaddexp(0.0, -z))
    delta4 = math.exp(log_d4) if log_d4 > -745.0 else 0.0

    G = penultimate_activation(weights0, batch, X0, T)
    alpha0 = smallest_singular_value(G, sigma_tol)

    return TheoryQuantities(
        T=T, L=L, beta=beta, beta0=beta0, norm_X0=nx0, norm_Y=ny, norm_MtY=nmty, C=C,
        lambda_bar=lam, Theta_L=theta, Theta_Lm1=theta_m1, Phi=Phi, Lambda=Lam,
        S_Lambda_T=S_Lam, S_Lambda_Tm1=S_Lam_m1, S_lambda_L=S_lam,
        zeta1=zeta1, zeta2=zeta2, delta1=d1, log_delta1=logd1,
        delta2=delta2, log_delta2=log_delta2, delta3=delta3,
        delta4=delta4, log_delta4=float(log_d4), alpha0=alpha0, overflow=overflow,
    )


@dataclass
class ConditionCheck:
    name: str
    passed: bool
    lhs: float
    rhs: float
    log_lhs: float
    log_rhs: float
    vacuous: bool = False

    def as_text(self) -> str:
        tag = "vacuous-pass" if self.vacuous else ("pass" if self.passed else "fail")
        return (
            f"{self.name}={tag} lhs={self.lhs:.17g} rhs={self.rhs:.17g} "
            f"log_lhs={self.log_lhs:.17g} log_rhs={self.log_rhs:.17g}"
        )


@dataclass
class ConditionReport:
    """Pure data; training never refuses to run on a failing report."""

    cond_11a: ConditionCheck
    cond_11b: ConditionCheck
    cond_11c: ConditionCheck
    cond_11d: ConditionCheck
    eta_max_12a: float
    eta_max_12b: float
    log_eta_max_12a: float
    log_eta_max_12b: float

    @property
    def eta_admissible(self) -> float:
        return min(self.eta_max_12a, self.eta_max_12b)

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in (self.cond_11a, self.cond_11b, self.cond_11c, self.cond_11d))

    def as_text(self) -> str:
        lines = [c.as_text() for c in (self.cond_11a, self.cond_11b, self.cond_11c, self.cond_11d)]
        lines.append(f"eta_max_12a={self.eta_max_12a:.17g}")
        lines.append(f"eta_max_12b={self.eta_max_12b:.17g}")
        lines.append(f"eta_admissible={self.eta_admissible:.17g}")
        lines.append(f"conditions_all_passed={'1' if self.all_passed else '0'}")
        return "\n".join(lines)


def _make_check(name: str, log_lhs: float, log_rhs: float, vacuous: bool = False) -> ConditionCheck:
    lhs = math.exp(log_lhs) if log_lhs < 709 else math.inf
    rhs = math.exp(log_rhs) if log_rhs < 709 else math.inf
    passed = vacuous or log_lhs >= log_rhs
    return ConditionCheck(name=name, passed=passed, lhs=lhs, rhs=rhs,
                          log_lhs=log_lhs, log_rhs=log_rhs, vacuous=vacuous)


def rate_coefficient(q: TheoryQuantities) -> float:
    """4 (beta0/beta)^2 delta4 alpha0^2, the per-step loss shrink factor."""
    lg = _log(4.0) + 2.0 * (_log(q.beta0) - _log(q.beta)) + q.log_delta4 + 2.0 * _log(q.alpha0)
    return math.exp(lg) if lg > -745.0 else 0.0


def check_conditions(q: TheoryQuantities) -> ConditionReport:
    """Evaluate the four alpha_0 conditions and the learning-rate ceilings.

    Comparisons run in log space so overflowed compounded constants still
    order correctly. Condition 11b's RHS can be negative, in which case it
    passes vacuously and is flagged as such.
    """
    log_a0 = _log(q.alpha0)
    lb, lb0 = _log(q.beta), _log(q.beta0)
    l1pb = _log(1.0 + q.beta)
    ltheta, ltheta_m1 = _log(q.Theta_L), _log(q.Theta_Lm1)
    lSlam = _log(q.S_lambda_L)
    lSL = _log(q.S_Lambda_T)
    lLamT = _log(q.Lambda[-1]) if q.T >= 1 else -math.inf

    # 11a: alpha0 >= 8 (1+beta) zeta2
    c11a = _make_check("cond_11a", log_a0, _log(8.0) + l1pb + _log(q.zeta2))

    # 11b: alpha0^2 >= beta^3/(4 beta0^2) delta4^-2 *
    #      (Theta_L^2 (Lambda_T + delta2) S_lambda S_Lambda,T
    #       - 1/2 Theta_{L-1}^2 Lambda_T S_Lambda,T-1)
    pos = 2.0 * ltheta + np.logaddexp(lLamT, q.log_delta2) + lSlam + lSL
    neg = _log(0.5) + 2.0 * ltheta_m1 + lLamT + _log(q.S_Lambda_Tm1)
    if pos <= neg:
        c11b = _make_check("cond_11b", 2.0 * log_a0, -math.inf, vacuous=True)
    else:
        bracket = pos + math.log1p(-math.exp(neg - pos)) if neg > -math.inf else pos
        rhs = 3.0 * lb - _log(4.0) - 2.0 * lb0 - 2.0 * q.log_delta4 + bracket
        c11b = _make_check("cond_11b", 2.0 * log_a0, rhs)

    # 11c: alpha0^2 >= max_l Theta_L/(C_l lambda_l) * beta^2 sqrt(beta)/(8 beta0^2)
    #      * delta4^-2 * zeta1 * S_Lambda,T
    lmax = max(ltheta - _log(c) - _log(l) for c, l in zip(q.C, q.lambda_bar))
    rhs = (lmax + 2.5 * lb - _log(8.0) - 2.0 * lb0 - 2.0 * q.log_delta4
           + _log(q.zeta1) + lSL)
    c11c = _make_check("cond_11c", 2.0 * log_a0, rhs)

    # 11d: alpha0^3 >= (1+beta) beta^2 sqrt(beta) / (2 beta0^2) * delta4^-2
    #      * Theta_L Theta_{L-1} zeta1 zeta2 S_lambda S_Lambda,T
    rhs = (l1pb + 2.5 * lb - _log(2.0) - 2.0 * lb0 - 2.0 * q.log_delta4
           + ltheta + ltheta_m1 + _log(q.zeta1) + _log(q.zeta2) + lSlam + lSL)
    c11d = _make_check("cond_11d", 3.0 * log_a0, rhs)

    # 12a: eta < 8/beta (delta2 + Lambda_T) (delta2 + Theta_L S_Lambda,T S_lambda)^-1 S_Lambda,T^-2
    log_12a = (_log(8.0) - lb + np.logaddexp(q.log_delta2, lLamT)
               - np.logaddexp(q.log_delta2, ltheta + lSL + lSlam) - 2.0 * lSL)
    # 12b: the eta at which the linear-rate base reaches zero,
    #      beta^2 / (4 beta0^2 delta4 alpha0^2)
    log_12b = 2.0 * lb - _log(4.0) - 2.0 * lb0 - q.log_delta4 - 2.0 * log_a0

    def _exp(lg: float) -> float:
        if lg == -math.inf:
            return 0.0
        return math.exp(lg) if lg < 709 else math.inf

    return ConditionReport(
        cond_11a=c11a, cond_11b=c11b, cond_11c=c11c, cond_11d=c11d,
        eta_max_12a=_exp(log_12a), eta_max_12b=_exp(log_12b),
        log_eta_max_12a=float(log_12a), log_eta_max_12b=float(log_12b),
    )


def eta_max_12b(q: TheoryQuantities) -> float:
    c = rate_coefficient(q)
    return math.inf if c == 0.0 else 1.0 / c


def predicted_rate(q: TheoryQuantities, eta: float, k: int) -> float:
    """(1 - 4 eta (beta0/beta)^2 delta4 alpha0^2)^k.

    Raises RateBoundError when eta reaches the 12b ceiling (strict
    inequality: the boundary itself is invalid) or when the base leaves
    (0, 1].
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    if k < 0:
        raise ValueError("k must be >= 0")
    c = rate_coefficient(q)
    base = 1.0 - eta * c
    if c > 0.0 and eta >= 1.0 / c:
        raise RateBoundError(eta, base)
    if not 0.0 < base <= 1.0:
        raise RateBoundError(eta, base)
    return base**k


def aligned_bound(
    q: TheoryQuantities, eta: float, k: int, T: int, X0: np.ndarray, Xstar: np.ndarray
) -> float:
    """r_k * (beta/T) * ||X0 - X*||^2: trained-rollout loss ceiling in terms
    of the plain-GD constant."""
    if T < 1:
        raise ValueError("T must be >= 1")
    dx = np.asarray(X0, dtype=np.float64) - np.asarray(Xstar, dtype=np.float64)
    return predicted_rate(q, eta, k) * (q.beta / T) * float(dx @ dx)


@dataclass
class BoundCheck:
    name: str
    passed: bool
    lhs: float
    rhs: float
    detail: str = ""

    def as_text(self) -> str:
        tag = "pass" if self.passed else "FAIL"
        s = f"{self.name}={tag} lhs={self.lhs:.17g} rhs={self.rhs:.17g}"
        return s + (f" ({self.detail})" if self.detail else "")


@dataclass
class BoundReport:
    checks: list[BoundCheck] = field(default_factory=list)
    lambda_inflated: bool = False

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def as_text(self) -> str:
        lines = [c.as_text() for c in self.checks]
        if self.lambda_inflated:
            lines.append("note=lambda_bar inflated to cover checked weights")
        lines.append(f"bounds_all_passed={'1' if self.all_passed else '0'}")
        return "\n".join(lines)


_REL_GUARD = 1e-9  # rounding allowance on analytic inequalities
_PROBE_GUARD = 1e-12


def _effective_lambda(q: TheoryQuantities, weight_sets: list[L2OWeights]) -> tuple[np.ndarray, bool]:
    lam = q.lambda_bar.copy()
    inflated = False
    for ws in weight_sets:
        for l, w in enumerate(ws.W):
            s = spectral_norm(w, 1e-8)
            if s > lam[l]:
                lam[l] = s
                inflated = True
    return lam, inflated


def _delta1_with(q: TheoryQuantities, theta: float) -> np.ndarray:
    cfac = 0.5 * (1.0 + q.beta) * theta
    out = np.empty(q.T)
    lin = 0.0
    for t in range(1, q.T + 1):
        lin = lin * (1.0 + cfac * q.Phi[t - 1]) + q.Lambda[t - 1]
        out[t - 1] = lin
    return out


def verify_bounds(
    trace: RolloutTrace,
    grads,
    q: TheoryQuantities,
    batch: QuadraticBatch,
    weights: L2OWeights,
    probes: int = 100,
    probe_seed: int = 0,
) -> BoundReport:
    """Check the bound lemmas against one observed rollout and its gradients.

    Covers: step sizes strictly inside (0, 2); probe-based contraction of
    I - (1/beta) D(P_t) M^T M; the linear-in-t iterate norm bound; and the
    per-layer gradient norm ceiling. If the checked weights left the
    lambda_bar ball the bound constants are recomputed with inflated
    lambda_bar so the lemma hypothesis still holds (flagged in the report).
    """
    report = BoundReport()
    lam, inflated = _effective_lambda(q, [weights])
    report.lambda_inflated = inflated
    theta = float(np.prod(lam))

    pmin = min(float(p.min()) for p in trace.P)
    pmax = max(float(p.max()) for p in trace.P)
    report.checks.append(BoundCheck(
        "p_range", 0.0 < pmin and pmax < 2.0, pmin, pmax, "open interval (0,2)"))

    rng = SeededRng(probe_seed)
    worst = 0.0
    for i in range(probes):
        P = trace.P[i % trace.T]
        v = rng.normals(P.size)
        nv = float(np.sqrt(v @ v))
        w = v - apply_gram(batch, P * v) / trace.beta
        ratio = float(np.sqrt(w @ w)) / nv
        worst = max(worst, ratio)
    report.checks.append(BoundCheck(
        "contraction_probes", worst <= 1.0 + _PROBE_GUARD, worst, 1.0,
        f"{probes} probes, worst ratio"))

    nx0 = float(np.sqrt(trace.X[0] @ trace.X[0]))
    worst_t, worst_lhs, worst_rhs = 0, nx0, nx0
    ok = True
    for t, x in enumerate(trace.X):
        lhs = float(np.sqrt(x @ x))
        rhs = nx0 + (2.0 * t / q.beta) * q.norm_MtY
        if lhs > rhs * (1.0 + _REL_GUARD):
            ok = False
        if lhs - rhs > worst_lhs - worst_rhs:
            worst_t, worst_lhs, worst_rhs = t, lhs, rhs
    report.checks.append(BoundCheck(
        "iterate_norm", ok, worst_lhs, worst_rhs, f"tightest at t={worst_t}"))

    res = math.sqrt(max(2.0 * objective(batch, trace.X[-1]), 0.0))
    SL = float(np.sum(q.Lambda))
    for l, g in enumerate(grads.dW):
        lhs = spectral_norm(g, 1e-8) if min(g.shape) > 1 else float(np.sqrt(np.sum(g * g)))
        rhs = math.sqrt(q.beta) * theta * SL / (2.0 * lam[l]) * res
        report.checks.append(BoundCheck(
            f"gradient_bound_l{l + 1}", lhs <= rhs * (1.0 + _REL_GUARD), lhs, rhs))
    return report


def semi_smoothness_checks(
    q: TheoryQuantities,
    weights_a: L2OWeights,
    weights_b: L2OWeights,
    trace_a: RolloutTrace,
    trace_b: RolloutTrace,
) -> list[BoundCheck]:
    """Per-step ||X_t^a - X_t^b|| against the weight-perturbation ceiling
    (1/2) delta_1^t Theta_L sum_l lambda_l^-1 ||W_l^a - W_l^b||_2."""
    lam, _ = _effective_lambda(q, [weights_a, weights_b])
    theta = float(np.prod(lam))
    d1 = _delta1_with(q, theta)
    wdiff = sum(
        spectral_norm(wa - wb, 1e-8) / l
        for wa, wb, l in zip(weights_a.W, weights_b.W, lam)
    )
    out = []
    for t in range(1, q.T + 1):
        dx = trace_a.X[t] - trace_b.X[t]
        lhs = float(np.sqrt(dx @ dx))
        rhs = 0.5 * d1[t - 1] * theta * wdiff
        out.append(BoundCheck(
            f"semi_smooth_t{t}", lhs <= rhs * (1.0 + _REL_GUARD) or lhs == 0.0, lhs, rhs))
    return out
