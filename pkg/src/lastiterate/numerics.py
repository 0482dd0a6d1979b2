"""Log-domain scalar helpers shared by the accountants and the auditing code."""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np
from scipy import special, stats

_SQRT2 = math.sqrt(2.0)
# Beyond this |z| the survival function is evaluated through erfcx.
_TAIL_SWITCH = 8.0
MAX_BISECTION_STEPS = 200


class BracketError(ValueError):
    """Raised when a root-finding bracket does not enclose the target."""


def log_binom_pmf(T: int, k, q: float):
    """ln[C(T, k) q^k (1 - q)^(T - k)], vectorized over ``k``."""
    if T < 1:
        raise ValueError(f"T must be positive, got {T}")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    k_arr = np.asarray(k)
    if np.any(k_arr < 0) or np.any(k_arr > T):
        raise ValueError(f"k must lie in [0, {T}]")
    k_arr = k_arr.astype(float)
    if q == 0.0:
        out = np.where(k_arr == 0, 0.0, -np.inf)
    elif q == 1.0:
        out = np.where(k_arr == T, 0.0, -np.inf)
    else:
        log_coef = special.gammaln(T + 1) - special.gammaln(k_arr + 1) - special.gammaln(T - k_arr + 1)
        out = log_coef + k_arr * math.log(q) + (T - k_arr) * math.log1p(-q)
    return float(out) if np.ndim(out) == 0 else out


def log_gaussian_sf(z):
    """ln Pr[N(0, 1) >= z], stable in both tails.

    For z > 8 the scaled complementary error function is used so the result
    never goes through ``1 - cdf``. For negative z the complement is taken with
    ``log1p`` of the (small) opposite tail.
    """
    z_arr = np.asarray(z, dtype=float)
    out = np.empty_like(z_arr)
    pos = z_arr > 0
    far = z_arr > _TAIL_SWITCH
    near = pos & ~far
    neg = ~pos
    with np.errstate(divide="ignore"):
        zf = z_arr[far]
        out[far] = np.log(0.5 * special.erfcx(zf / _SQRT2)) - 0.5 * zf * zf
        out[near] = special.log_ndtr(-z_arr[near])
        out[neg] = np.log1p(-0.5 * special.erfc(-z_arr[neg] / _SQRT2))
    return float(out) if out.ndim == 0 else out


def log_gaussian_cdf(z):
    """ln Pr[N(0, 1) <= z]."""
    return log_gaussian_sf(-np.asarray(z, dtype=float))


def logsumexp(terms: Iterable[float]) -> float:
    """ln sum(exp(terms)) with the max-shift trick; all -inf gives -inf."""
    values = np.asarray(terms if isinstance(terms, (list, tuple, np.ndarray)) else list(terms), dtype=float)
    if values.size == 0:
        raise ValueError("logsumexp needs at least one term")
    top = values.max()
    if top == -np.inf:
        return -math.inf
    if top == np.inf:
        return math.inf
    return float(top + np.log(np.exp(values - top).sum()))


def log_diff_exp(a: float, b: float) -> float:
    """ln(exp(a) - exp(b)) for a >= b; -inf when the difference vanishes."""
    if b == -math.inf:
        return a
    if b >= a:
        return -math.inf
    return a + math.log(-math.expm1(b - a))


def invert_monotone(
    f: Callable[[float], float],
    target: float,
    bracket: tuple[float, float],
    tol: float = 1e-12,
) -> float:
    """Solve ``f(y) = target`` by bisection on a monotone ``f``.

    Works for nondecreasing and nonincreasing ``f``; the direction is read off
    the bracket end points. Bisection stops once the bracket is narrower than
    ``tol * max(1, |lo|, |hi|)`` or after ``MAX_BISECTION_STEPS`` halvings.

    Raises:
        BracketError: if ``target`` is not between ``f(lo)`` and ``f(hi)``.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not lo < hi:
        raise BracketError(f"empty bracket [{lo}, {hi}]")
    f_lo, f_hi = f(lo), f(hi)
    increasing = f_hi >= f_lo
    if increasing and not f_lo <= target <= f_hi:
        raise BracketError(f"target {target} outside [f(lo)={f_lo}, f(hi)={f_hi}]")
    if not increasing and not f_hi <= target <= f_lo:
        raise BracketError(f"target {target} outside [f(hi)={f_hi}, f(lo)={f_lo}]")
    for _ in range(MAX_BISECTION_STEPS):
        if hi - lo <= tol * max(1.0, abs(lo), abs(hi)):
            break
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        below = f(mid) < target if increasing else f(mid) > target
        if below:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def clopper_pearson(successes: int, trials: int, confidence: float, side: str) -> float:
    """One-sided exact binomial confidence bound at the given confidence level.

    Uses the Beta-quantile form: the lower bound is the ``1 - confidence``
    quantile of Beta(k, n - k + 1) and the upper bound the ``confidence``
    quantile of Beta(k + 1, n - k).
    """
    if trials < 1:
        raise ValueError(f"trials must be positive, got {trials}")
    if not 0 <= successes <= trials:
        raise ValueError(f"successes must lie in [0, {trials}], got {successes}")
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must lie in (0, 1), got {confidence}")
    alpha = 1.0 - confidence
    if side == "lower":
        if successes == 0:
            return 0.0
        if successes == trials:
            return alpha ** (1.0 / trials)
        return float(stats.beta.ppf(alpha, successes, trials - successes + 1))
    if side == "upper":
        if successes == trials:
            return 1.0
        if successes == 0:
            return 1.0 - alpha ** (1.0 / trials)
        return float(stats.beta.ppf(confidence, successes + 1, trials - successes))
    raise ValueError(f"side must be 'lower' or 'upper', got {side!r}")
