"""Comparison analyses: full-batch DP-GD and a composition-based upper bound.

The standard analysis here is a Renyi-DP composition bound for the Poisson
subsampled Gaussian mechanism. It upper-bounds the tight composition of
DP-SGD with all intermediate iterates released, and therefore also the
last-iterate heuristic.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .accountant import EPSILON_TOL, SgdParams, _invert_delta, heuristic_epsilon
from .numerics import BracketError, log_diff_exp, log_gaussian_cdf, logsumexp


def _default_orders() -> tuple[float, ...]:
    fine = np.arange(2.0, 8.0, 0.25)
    coarse = np.arange(8.0, 65.0, 1.0)
    return tuple([1.25, 1.5, 1.75, *fine.tolist(), *coarse.tolist(), 128.0, 256.0, 512.0])


DEFAULT_ORDERS = _default_orders()


def fullbatch_rescale(params: SgdParams) -> SgdParams:
    """Map DP-SGD(T, q, eta, sigma) to full-batch DP-GD(T, 1, eta*q, sigma/q)."""
    if params.q == 0:
        raise ValueError("full-batch rescaling is undefined for q = 0")
    if params.q == 1.0:
        return params
    return dataclasses.replace(params, q=1.0, eta=params.eta * params.q, sigma=params.sigma / params.q)


def gdp_mu(params: SgdParams) -> float:
    """sqrt(T)/sigma, the GDP parameter of full-batch DP-GD."""
    return math.sqrt(params.T) / params.sigma


def gaussian_mechanism_delta(mu: float, epsilon: float) -> float:
    """delta(eps) = Phi(-eps/mu + mu/2) - e^eps Phi(-eps/mu - mu/2)."""
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    a = log_gaussian_cdf(-epsilon / mu + mu / 2.0)
    b = epsilon + log_gaussian_cdf(-epsilon / mu - mu / 2.0)
    return min(1.0, math.exp(log_diff_exp(a, b)))


def gaussian_mechanism_epsilon(mu: float, delta: float, tol: float = EPSILON_TOL) -> float:
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return _invert_delta(lambda eps: gaussian_mechanism_delta(mu, eps), delta, tol)


def fullbatch_epsilon(params: SgdParams, delta: float) -> float:
    """Epsilon of the full-batch surrogate; 0 when the canary is never sampled."""
    if params.q == 0:
        return 0.0
    return gaussian_mechanism_epsilon(gdp_mu(fullbatch_rescale(params)), delta)


# Renyi divergence of the sampled Gaussian mechanism, per step.


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    i = np.arange(alpha + 1, dtype=float)
    log_coef = special.gammaln(alpha + 1) - special.gammaln(i + 1) - special.gammaln(alpha - i + 1)
    terms = log_coef + i * math.log(q) + (alpha - i) * math.log1p(-q) + (i * i - i) / (2 * sigma**2)
    return logsumexp(terms)


def _log_erfc(x):
    # erfc(x) = 2 Pr[N(0,1) >= sqrt(2) x]
    return math.log(2.0) + log_gaussian_cdf(-math.sqrt(2.0) * np.asarray(x, dtype=float))


_FRAC_CHUNK = 256
_FRAC_MAX_TERMS = 10_000


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    """Series for fractional orders; terms are split at the point z0 where the
    two mixture components have equal density.

    Terms are summed up to the first index where both are below e^-30.
    """
    z0 = sigma**2 * math.log(1.0 / q - 1.0) + 0.5
    pos_terms, neg_terms = [], []
    for start in range(0, _FRAC_MAX_TERMS, _FRAC_CHUNK):
        i = np.arange(start, start + _FRAC_CHUNK, dtype=float)
        coef = special.binom(alpha, i)
        with np.errstate(divide="ignore"):
            log_coef = np.log(np.abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2.0) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2.0) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2 * sigma**2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2 * sigma**2) + log_e1
        small = np.flatnonzero(np.maximum(log_s0, log_s1) < -30)
        stop = int(small[0]) + 1 if small.size else _FRAC_CHUNK
        positive = coef[:stop] > 0
        both = np.concatenate((log_s0[:stop], log_s1[:stop]))
        sign = np.concatenate((positive, positive))
        pos_terms.append(both[sign])
        neg_terms.append(both[~sign])
        if small.size:
            break
    pos_terms, neg_terms = np.concatenate(pos_terms), np.concatenate(neg_terms)
    log_pos = logsumexp(pos_terms)
    log_neg = logsumexp(neg_terms) if neg_terms.size else -math.inf
    return log_diff_exp(log_pos, log_neg)


def renyi_sampled_gaussian(q: float, sigma: float, order: float) -> float:
    """Order-``order`` Renyi divergence of one Poisson-subsampled Gaussian step."""
    if q == 0:
        return 0.0
    if q == 1.0:
        return order / (2 * sigma**2)
    if float(order).is_integer():
        log_a = _log_a_int(q, sigma, int(order))
    else:
        log_a = _log_a_frac(q, sigma, order)
    return log_a / (order - 1)


def renyi_to_epsilon(rdp: Sequence[float], orders: Sequence[float], delta: float) -> tuple[float, float]:
    """Convert composed RDP to epsilon at ``delta``; returns (eps, best order).

    Uses eps = rdp + ln((a-1)/a) - (ln delta + ln a)/(a-1), a valid and
    slightly sharper variant of the classical rdp + ln(1/delta)/(a-1).
    """
    orders_arr = np.asarray(orders, dtype=float)
    rdp_arr = np.asarray(rdp, dtype=float)
    eps = rdp_arr + np.log1p(-1.0 / orders_arr) - (math.log(delta) + np.log(orders_arr)) / (orders_arr - 1)
    eps = np.where(np.isnan(eps), np.inf, eps)
    idx = int(np.argmin(eps))
    return max(0.0, float(eps[idx])), float(orders_arr[idx])


def standard_epsilon(
    params: SgdParams,
    delta: float,
    orders: Optional[Sequence[float]] = None,
) -> float:
    """Composition-based epsilon (an upper bound) for DP-SGD with all iterates released."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if params.q == 0:
        return 0.0
    if params.q == 1.0:
        return gaussian_mechanism_epsilon(gdp_mu(params), delta)
    orders = DEFAULT_ORDERS if orders is None else orders
    rdp = [params.T * renyi_sampled_gaussian(params.q, params.sigma, a) for a in orders]
    return renyi_to_epsilon(rdp, orders, delta)[0]


def sigma_for_standard_epsilon(
    T: int,
    q: float,
    target_epsilon: float,
    delta: float,
    tol: float = 1e-4,
) -> float:
    """Noise multiplier at which the standard analysis gives ``target_epsilon``.

    For T = 1 the exact single-step value (the heuristic, which is tight for a
    single step) is used instead of the Renyi bound.
    """
    if not target_epsilon > 0:
        raise ValueError("target_epsilon must be positive")
    if not 0 < q <= 1:
        raise ValueError(f"q must lie in (0, 1], got {q}")

    def eps_at(sigma: float) -> float:
        params = SgdParams(T, q, sigma)
        if T == 1:
            return heuristic_epsilon(params, delta)
        return standard_epsilon(params, delta)

    lo, hi = 0.5, 2.0
    for _ in range(60):
        if eps_at(lo) > target_epsilon:
            break
        lo /= 2.0
    else:
        raise BracketError(f"epsilon {target_epsilon} unreachable for small sigma")
    for _ in range(60):
        if eps_at(hi) < target_epsilon:
            break
        hi *= 2.0
    else:
        raise BracketError(f"epsilon {target_epsilon} unreachable for large sigma")
    # eps is decreasing in sigma; bisect in log-space.
    for _ in range(100):
        mid = math.sqrt(lo * hi)
        eps = eps_at(mid)
        if abs(eps - target_epsilon) <= tol * 0.1 or hi / lo - 1.0 < 1e-10:
            return mid
        if eps > target_epsilon:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)
