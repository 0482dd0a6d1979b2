"""Last-iterate heuristic accountant for DP-SGD.

Under a linear loss the last iterate of DP-SGD reduces to distinguishing

    P = sum_j w_j N(s_j, v)    versus    Q = N(0, v)

where the shifts ``s_j`` are nonnegative. For plain DP-SGD the weights are
Binomial(T, q) and ``v = T sigma^2``. The privacy loss ``f(y) = ln P(y)/Q(y)``
is increasing in ``y``, so both hockey-stick divergences are attained on
half-lines and reduce to Gaussian tail sums evaluated at ``f^{-1}(+-eps)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .numerics import (
    log_binom_pmf,
    log_diff_exp,
    log_gaussian_cdf,
    log_gaussian_sf,
    logsumexp,
)

EPSILON_TOL = 1e-6
Y_TOL = 1e-12
# Atoms lighter than the mode by this factor are dropped for large T.
TRUNCATION_LOG_FLOOR = math.log(1e-18)
TRUNCATE_ABOVE_T = 1000
MAX_BRACKET_DOUBLINGS = 2000


@dataclass(frozen=True)
class SgdParams:
    """DP-SGD hyperparameters: steps, sampling rate, noise multiplier, learning rate."""

    T: int
    q: float
    sigma: float
    eta: float = 1.0

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T}")
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"q must lie in [0, 1], got {self.q}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")


@dataclass(frozen=True)
class PrivacyPoint:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")


@dataclass(frozen=True, eq=False)
class ShiftMixture:
    """Finite Gaussian location mixture with nonnegative shifts, against N(0, variance).

    Weights are held in log space so that masses far below the float range
    (e.g. ``(1 - q)^T`` for large T) keep their exact value.
    """

    variance: float
    shifts: np.ndarray
    log_weights: np.ndarray
    _scale: float = field(init=False, repr=False)

    def __post_init__(self):
        shifts = np.array(self.shifts, dtype=float).ravel()
        log_w = np.array(self.log_weights, dtype=float).ravel()
        if not self.variance > 0:
            raise ValueError(f"variance must be positive, got {self.variance}")
        if shifts.size == 0 or shifts.size != log_w.size:
            raise ValueError("need at least one atom and matching shift/weight lengths")
        if np.any(shifts < 0):
            raise ValueError("shifts must be nonnegative")
        if np.any(np.diff(shifts) <= 0):
            raise ValueError("shifts must be strictly increasing")
        if np.any(log_w > 0) or np.any(np.isnan(log_w)):
            raise ValueError("weights must be probabilities")
        total = logsumexp(log_w)
        if abs(math.expm1(total)) > 1e-12:
            raise ValueError(f"weights sum to {math.exp(total)!r}, not 1")
        shifts.setflags(write=False)
        log_w.setflags(write=False)
        object.__setattr__(self, "shifts", shifts)
        object.__setattr__(self, "log_weights", log_w)
        object.__setattr__(self, "_scale", math.sqrt(self.variance))

    @classmethod
    def from_atoms(cls, variance: float, atoms: Iterable[tuple[float, float]]) -> "ShiftMixture":
        pairs = sorted((float(s), float(p)) for s, p in atoms)
        shifts = np.array([s for s, _ in pairs])
        with np.errstate(divide="ignore"):
            log_w = np.log(np.array([p for _, p in pairs]))
        return cls(variance, shifts, log_w)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.shifts.tolist(), self.probs.tolist()))

    @property
    def std(self) -> float:
        return self._scale

    @property
    def is_trivial(self) -> bool:
        """True when P equals Q (the only atom sits at zero)."""
        return bool(self.shifts[-1] == 0.0)

    @property
    def loss_infimum(self) -> float:
        """lim f(y) as y -> -inf: the log-mass of the zero shift, or -inf."""
        return float(self.log_weights[0]) if self.shifts[0] == 0.0 else -math.inf


def binomial_gaussian_pair(params: SgdParams) -> ShiftMixture:
    """Binomial(T, q) + N(0, T sigma^2) versus N(0, T sigma^2)."""
    T, q = params.T, params.q
    variance = T * params.sigma**2
    if q == 0.0:
        return ShiftMixture(variance, np.array([0.0]), np.array([0.0]))
    if q == 1.0:
        return ShiftMixture(variance, np.array([float(T)]), np.array([0.0]))
    k = np.arange(T + 1)
    log_w = log_binom_pmf(T, k, q)
    if T > TRUNCATE_ABOVE_T:
        keep = log_w >= log_w.max() + TRUNCATION_LOG_FLOOR
        k, log_w = k[keep], log_w[keep]
    # gammaln round-off over many atoms drifts the total by ~1e-12
    log_w = log_w - logsumexp(log_w)
    return ShiftMixture(variance, k.astype(float), log_w)


def _loss_terms(mix: ShiftMixture, y: float) -> np.ndarray:
    s = mix.shifts
    return mix.log_weights + (2.0 * s * y - s * s) / (2.0 * mix.variance)


def privacy_loss_at(mix: ShiftMixture, y: float) -> float:
    """f(y) = ln sum_j w_j exp((2 s_j y - s_j^2) / (2 v))."""
    return logsumexp(_loss_terms(mix, y))


def inverse_privacy_loss(mix: ShiftMixture, target: float) -> Optional[float]:
    """Return y with f(y) = target, or None when target <= inf f.

    ``None`` means the sublevel set {y : f(y) <= target} is empty.
    """
    if mix.is_trivial:
        raise ValueError("privacy loss is constant when every shift is zero")
    if target <= mix.loss_infimum:
        return None
    pos = mix.shifts > 0
    s, lw = mix.shifts[pos], mix.log_weights[pos]
    # Any single atom already forces f(y) >= target at this point.
    hi = float(np.min((target - lw) * mix.variance / s + s / 2.0))
    step = max(1.0, mix.std)
    lo = hi - step
    for _ in range(MAX_BRACKET_DOUBLINGS):
        if privacy_loss_at(mix, lo) <= target:
            break
        step *= 2.0
        lo = hi - step
    else:
        raise ArithmeticError(f"could not bracket f^-1({target})")
    return _bisect_loss(mix, target, lo, hi)


def _bisect_loss(mix: ShiftMixture, target: float, lo: float, hi: float) -> float:
    tol = Y_TOL * mix.std
    for _ in range(200):
        if hi - lo <= tol * max(1.0, abs(lo), abs(hi)) / max(1.0, mix.std):
            break
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if privacy_loss_at(mix, mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def hockey_stick_pq(mix: ShiftMixture, epsilon: float) -> float:
    """H_{e^eps}(P, Q) = P(Y >= y*) - e^eps Q(Y >= y*) with y* = f^{-1}(eps)."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if mix.is_trivial:
        return 0.0
    y = inverse_privacy_loss(mix, epsilon)
    if y is None:
        return 0.0
    z = (y - mix.shifts) / mix.std
    log_p = logsumexp(mix.log_weights + log_gaussian_sf(z))
    log_q = epsilon + log_gaussian_sf(y / mix.std)
    return min(1.0, math.exp(log_diff_exp(log_p, log_q)))


def hockey_stick_qp(mix: ShiftMixture, epsilon: float) -> float:
    """H_{e^eps}(Q, P) = Q(Y <= y**) - e^eps P(Y <= y**) with y** = f^{-1}(-eps)."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if mix.is_trivial:
        return 0.0
    y = inverse_privacy_loss(mix, -epsilon)
    if y is None:
        return 0.0
    log_q = log_gaussian_cdf(y / mix.std)
    z = (y - mix.shifts) / mix.std
    log_p = epsilon + logsumexp(mix.log_weights + log_gaussian_cdf(z))
    return min(1.0, math.exp(log_diff_exp(log_q, log_p)))


def delta_from_epsilon(mix: ShiftMixture, epsilon: float) -> float:
    return max(hockey_stick_pq(mix, epsilon), hockey_stick_qp(mix, epsilon))


def epsilon_from_delta(mix: ShiftMixture, delta: float, tol: float = EPSILON_TOL) -> float:
    """Smallest eps >= 0 (to within ``tol``) with delta_from_epsilon(eps) <= delta.

    The returned value is the upper end of the final bracket, so it always
    satisfies the delta constraint.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return _invert_delta(lambda eps: delta_from_epsilon(mix, eps), delta, tol)


def _invert_delta(delta_fn, delta: float, tol: float) -> float:
    if delta_fn(0.0) <= delta:
        return 0.0
    lo, hi = 0.0, 1.0
    while delta_fn(hi) > delta:
        lo, hi = hi, 2.0 * hi
        if hi > 1e6:
            raise ArithmeticError("epsilon bracket diverged")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if delta_fn(mid) > delta:
            lo = mid
        else:
            hi = mid
    return hi


def heuristic_epsilon(params: SgdParams, delta: float) -> float:
    """Last-iterate heuristic epsilon for DP-SGD at the given delta."""
    return epsilon_from_delta(binomial_gaussian_pair(params), delta)


def heuristic_delta(params: SgdParams, epsilon: float) -> float:
    return delta_from_epsilon(binomial_gaussian_pair(params), epsilon)


def sweep_steps(T: int, cutoff: int = 100, growth: float = 1.05) -> list[int]:
    """Every t up to ``cutoff``, then a geometric subsample that always ends at T."""
    steps = list(range(1, min(T, cutoff) + 1))
    t = float(steps[-1])
    while steps[-1] < T:
        t = max(t * growth, steps[-1] + 1)
        steps.append(min(T, int(math.floor(t))))
    return steps


def heuristic_sweep_max(
    params: SgdParams,
    delta: float,
    cutoff: int = 100,
    growth: float = 1.05,
) -> tuple[float, int]:
    """max over t <= T of the heuristic epsilon, with its argmax (ties go to the smaller t)."""
    best_eps, best_t = -1.0, 1
    for t in sweep_steps(params.T, cutoff, growth):
        eps = heuristic_epsilon(SgdParams(t, params.q, params.sigma, params.eta), delta)
        if eps > best_eps:
            best_eps, best_t = eps, t
    return best_eps, best_t


def epsilon_curve(params: SgdParams, delta: float, steps: Sequence[int]) -> np.ndarray:
    return np.array(
        [heuristic_epsilon(SgdParams(int(t), params.q, params.sigma, params.eta), delta) for t in steps]
    )
