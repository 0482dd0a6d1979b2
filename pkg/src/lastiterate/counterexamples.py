"""Constructions where the last-iterate heuristic is not an upper bound.

Three families live here:

* linear loss plus a quadratic regularizer of strength ``alpha``, whose last
  iterate is a Gaussian shifted by a geometrically weighted Bernoulli sum;
* a regularizer that zeroes the model every step, leaving one step of privacy;
* models that store the per-step presence of the canary in separate
  coordinates, either through a shift-register regularizer or through a
  malicious dataset of "repeater" examples that cancel noise and amplify
  thresholded decisions.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import stats

from .accountant import (
    EPSILON_TOL,
    SgdParams,
    ShiftMixture,
    _invert_delta,
    epsilon_from_delta,
    heuristic_epsilon,
    heuristic_sweep_max,
    inverse_privacy_loss,
)
from .numerics import log_diff_exp, log_gaussian_cdf, log_gaussian_sf, logsumexp

MAX_ENUMERATION_STEPS = 25
MERGE_TOL = 1e-12


class ClippingViolation(ArithmeticError):
    """The repeaters' gradient got clipped, so the attack's premise fails."""


@dataclass(frozen=True)
class QuadraticParams:
    base: SgdParams
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def _merge_atoms(shifts: np.ndarray, probs: np.ndarray, tol: float = MERGE_TOL):
    order = np.argsort(shifts, kind="stable")
    shifts, probs = shifts[order], probs[order]
    starts = np.concatenate(([True], np.diff(shifts) > tol))
    group = np.cumsum(starts) - 1
    merged_p = np.bincount(group, weights=probs)
    merged_s = shifts[starts]
    keep = merged_p > 0
    return merged_s[keep], merged_p[keep]


def _mixture_from_probs(variance: float, shifts: np.ndarray, probs: np.ndarray) -> ShiftMixture:
    log_w = np.log(probs)
    return ShiftMixture(variance, shifts, log_w - logsumexp(log_w))


def quadratic_mixture(qp: QuadraticParams) -> ShiftMixture:
    """Exact last-iterate pair for linear loss + (alpha/2) m^2 regularizer, eta = 1.

    Shifts are sum_i (1-alpha)^(i-1) B_i with B_i ~ Bernoulli(q) i.i.d., and the
    noise variance is sigma^2 sum_i (1-alpha)^(2(i-1)).
    """
    T, q, sigma = qp.base.T, qp.base.q, qp.base.sigma
    if T > MAX_ENUMERATION_STEPS:
        raise ValueError(f"enumeration needs T <= {MAX_ENUMERATION_STEPS}, got {T}")
    decay = 1.0 - qp.alpha
    weights = np.array([decay**i for i in range(T)])
    variance = sigma**2 * float(np.sum(weights**2))
    shifts, probs = np.zeros(1), np.ones(1)
    for c in weights:
        shifts = np.concatenate((shifts, shifts + c))
        probs = np.concatenate((probs * (1.0 - q), probs * q))
        shifts, probs = _merge_atoms(shifts, probs)
    return _mixture_from_probs(variance, shifts, probs)


def round_support(mix: ShiftMixture, floor: float = 5e-4, base: float = 1.05) -> ShiftMixture:
    """Round positive shifts up to ``floor`` and then up to a power of ``base``.

    Moving mass to larger shifts can only make the pair easier to
    distinguish, so the rounded mixture's epsilon dominates the original.
    """
    shifts = mix.shifts.copy()
    pos = shifts > 0
    lifted = np.maximum(shifts[pos], floor)
    # The small slack keeps exact powers (e.g. 1.0) from being pushed up a notch.
    expo = np.ceil(np.log(lifted) / math.log(base) - 1e-9)
    shifts[pos] = base**expo
    merged_s, merged_p = _merge_atoms(shifts, mix.probs)
    return _mixture_from_probs(mix.variance, merged_s, merged_p)


class QuadraticRatio(NamedTuple):
    ratio: float
    eps_quadratic: float
    eps_linear_sweep: float
    rounded: bool


def quadratic_epsilon_ratio(qp: QuadraticParams, delta: float, round_above: int = 12) -> QuadraticRatio:
    """Quadratic-regularizer epsilon divided by the max-over-t linear heuristic."""
    mix = quadratic_mixture(qp)
    rounded = qp.base.T > round_above
    if rounded:
        mix = round_support(mix)
    eps_quad = epsilon_from_delta(mix, delta)
    eps_lin, _ = heuristic_sweep_max(qp.base, delta, cutoff=max(qp.base.T, 100))
    ratio = eps_quad / eps_lin if eps_lin > 0 else (1.0 if eps_quad == 0 else math.inf)
    return QuadraticRatio(ratio, eps_quad, eps_lin, rounded)


def zeroing_regularizer_epsilon(params: SgdParams, delta: float) -> float:
    """Epsilon of the last iterate when the regularizer resets the model each step."""
    return heuristic_epsilon(dataclasses.replace(params, T=1), delta)


# Encoding attack with a malicious dataset.


@dataclass(frozen=True)
class EncoderConfig:
    """Parameters of the encoding attack; the model dimension equals ``T``.

    ``t_past`` defaults to ``big_val / 2``.
    """

    T: int
    p: float
    sigma: float
    N: int = 32768
    big_val: float = 1e4
    t_past: Optional[float] = None
    t_last: float = 0.5
    eta: float = 1.0
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.t_past is None:
            object.__setattr__(self, "t_past", self.big_val / 2.0)
        if self.T < 1:
            raise ValueError("T must be positive")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if not 0.0 < self.t_past < self.big_val:
            raise ValueError("need 0 < t_past < big_val")
        if not 0.0 < self.t_last < 1.0:
            raise ValueError("need 0 < t_last < 1")
        if self.N < 1 or self.eta <= 0 or self.clip_norm <= 0:
            raise ValueError("N, eta and clip_norm must be positive")

    @classmethod
    def from_params(cls, params: SgdParams, **overrides) -> "EncoderConfig":
        return cls(T=params.T, p=params.q, sigma=params.sigma, eta=params.eta, **overrides)


@dataclass(frozen=True)
class EncoderTrace:
    final_model: np.ndarray
    presence_bits: np.ndarray
    canary_included: bool


def encode_canary_gradient(i: int, T: int) -> np.ndarray:
    """Canary gradient at (1-based) step ``i``: the negated i-th basis vector."""
    if not 1 <= i <= T:
        raise IndexError(f"step {i} outside [1, {T}]")
    g = np.zeros(T)
    g[i - 1] = -1.0
    return g


def encode_repeater_gradient(model: np.ndarray, i: int, cfg: EncoderConfig) -> np.ndarray:
    """Per-repeater gradient at (1-based) step ``i``, before clipping.

    Works on a single model vector or a batch of shape (n, T). Coordinates
    from ``i-1`` on (0-based) are cancelled; coordinate ``i-2`` holds last
    step's canary signal and is pushed to +-big_val against ``t_last``; older
    coordinates are refreshed to +-big_val against ``t_past``.
    """
    model = np.asarray(model, dtype=float)
    if model.shape[-1] != cfg.T:
        raise ValueError(f"model has {model.shape[-1]} coordinates, expected {cfg.T}")
    if not 1 <= i <= cfg.T:
        raise IndexError(f"step {i} outside [1, {cfg.T}]")
    scale = cfg.eta * cfg.N
    n_hist = i - 1
    a = -model / scale
    target = np.zeros_like(model)
    if n_hist > 1:
        old = model[..., : n_hist - 1]
        target[..., : n_hist - 1] = np.where(old >= cfg.t_past, cfg.big_val, -cfg.big_val)
    if n_hist > 0:
        last = model[..., n_hist - 1]
        target[..., n_hist - 1] = np.where(last >= cfg.t_last, cfg.big_val, -cfg.big_val)
    a = a + target / scale
    return -a


def _clip(g: np.ndarray, c: float) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    factor = np.minimum(1.0, c / np.where(norms > 0, norms, 1.0))
    return g * factor, norms[..., 0]


def simulate_encoding_batch(
    cfg: EncoderConfig, with_canary: bool, rng: np.random.Generator, n: int
) -> tuple[np.ndarray, np.ndarray]:
    """Run the encoding attack ``n`` times; returns (final models, presence bits)."""
    T = cfg.T
    m = np.zeros((n, T))
    bits = np.zeros((n, T), dtype=bool)
    canary_step = _clip(np.eye(T) * -1.0, cfg.clip_norm)[0]
    for i in range(1, T + 1):
        u = rng.random(n)
        noise = rng.standard_normal((n, T))
        r, norms = _clip(encode_repeater_gradient(m, i, cfg), cfg.clip_norm)
        if np.any(norms > cfg.clip_norm * (1 + 1e-12)):
            worst = float(norms.max())
            raise ClippingViolation(
                f"repeater gradient norm {worst:.4g} exceeds clip norm {cfg.clip_norm} at step {i}; "
                "increase N or lower big_val"
            )
        z = cfg.N * r
        if with_canary:
            present = u < cfg.p
            bits[:, i - 1] = present
            z = z + present[:, None] * canary_step[i - 1]
        z = z + cfg.sigma * cfg.clip_norm * noise
        m = m - cfg.eta * z
    return m, bits


def encode_attack_run(cfg: EncoderConfig, with_canary: bool, seed: int) -> EncoderTrace:
    rng = np.random.Generator(np.random.Philox(seed))
    m, bits = simulate_encoding_batch(cfg, with_canary, rng, 1)
    return EncoderTrace(m[0], bits[0], with_canary)


def decode_presence(final_model: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Read the per-step canary decisions back out of encoded final models."""
    final_model = np.asarray(final_model, dtype=float)
    decided = final_model[..., :-1] >= 0.0
    last = final_model[..., -1:] >= cfg.t_last
    return np.concatenate((decided, last), axis=-1)


def _encoding_bit_rates(cfg: EncoderConfig) -> tuple[float, float, float]:
    """(signal, P[bit | no canary], P[bit | canary]) for the thresholded coordinates."""
    noise = cfg.sigma * cfg.clip_norm
    signal = min(1.0, cfg.clip_norm)
    t = cfg.t_last / cfg.eta
    a0 = math.exp(log_gaussian_sf(t / noise))
    a_hit = math.exp(log_gaussian_sf((t - signal) / noise))
    return signal, a0, (1.0 - cfg.p) * a0 + cfg.p * a_hit


def encoding_score(final_model: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Log-likelihood ratio of canary vs. no canary, from decoded bits and the last coordinate."""
    if cfg.sigma == 0:
        raise ValueError("the likelihood ratio needs sigma > 0")
    signal, a0, a1 = _encoding_bit_rates(cfg)
    bits = decode_presence(final_model, cfg)[..., :-1]
    ones = bits.sum(axis=-1)
    zeros = bits.shape[-1] - ones
    with np.errstate(divide="ignore"):
        bit_llr = ones * (math.log(a1) - math.log(a0)) + zeros * (math.log1p(-a1) - math.log1p(-a0))
    y = np.asarray(final_model, dtype=float)[..., -1] / cfg.eta
    v = (cfg.sigma * cfg.clip_norm) ** 2
    if cfg.p == 0:
        last_llr = np.zeros_like(y)
    else:
        terms = np.stack(
            [
                np.full_like(y, math.log1p(-cfg.p)) if cfg.p < 1 else np.full_like(y, -np.inf),
                math.log(cfg.p) + (2 * signal * y - signal**2) / (2 * v),
            ]
        )
        top = terms.max(axis=0)
        last_llr = top + np.log(np.exp(terms - top).sum(axis=0))
    return bit_llr + last_llr


def encoding_attack_epsilon(cfg: EncoderConfig, delta: float, tol: float = EPSILON_TOL) -> float:
    """Exact epsilon of the encoding attack's final model at ``delta``.

    The final model is summarized without loss by the number of positive
    decisions among the first T-1 coordinates (Binomial, with the rates of
    the thresholded canary signal) and the last, undecided coordinate (a
    Bernoulli-shifted Gaussian).
    """
    if cfg.sigma <= 0:
        raise ValueError("sigma must be positive")
    signal, a0, a1 = _encoding_bit_rates(cfg)
    n_bits = cfg.T - 1
    last = ShiftMixture.from_atoms((cfg.sigma * cfg.clip_norm) ** 2, [(0.0, 1.0 - cfg.p), (signal, cfg.p)])
    if last.is_trivial and a0 == a1:
        return 0.0
    c = np.arange(n_bits + 1)
    log_pc = stats.binom.logpmf(c, n_bits, a1)
    log_qc = stats.binom.logpmf(c, n_bits, a0)
    bit_loss = log_pc - log_qc
    std = last.std

    def one_side(eps: float, p_side: bool) -> float:
        pos, neg = [], []
        for lp, lq, g in zip(log_pc, log_qc, bit_loss):
            if not (np.isfinite(lp) or np.isfinite(lq)):
                continue
            if p_side:
                # {y : g + f(y) >= eps}; P-mass minus e^eps Q-mass.
                if last.is_trivial:
                    inside = g >= eps
                    if inside:
                        pos.append(lp)
                        neg.append(eps + lq)
                    continue
                y = inverse_privacy_loss(last, eps - g)
                if y is None:
                    pos.append(lp)
                    neg.append(eps + lq)
                    continue
                pos.append(lp + logsumexp(last.log_weights + log_gaussian_sf((y - last.shifts) / std)))
                neg.append(eps + lq + log_gaussian_sf(y / std))
            else:
                # {y : g + f(y) <= -eps}; Q-mass minus e^eps P-mass.
                if last.is_trivial:
                    if g <= -eps:
                        pos.append(lq)
                        neg.append(eps + lp)
                    continue
                y = inverse_privacy_loss(last, -eps - g)
                if y is None:
                    continue
                pos.append(lq + log_gaussian_cdf(y / std))
                neg.append(eps + lp + logsumexp(last.log_weights + log_gaussian_cdf((y - last.shifts) / std)))
        if not pos:
            return 0.0
        return math.exp(log_diff_exp(logsumexp(pos), logsumexp(neg)))

    def delta_fn(eps: float) -> float:
        return max(one_side(eps, True), one_side(eps, False))

    return _invert_delta(delta_fn, delta, tol)


# Shift-register regularizer (the analytic pathological example).


def simulate_history_register(
    T: int, p: float, sigma: float, v: float, with_canary: bool, rng: np.random.Generator, n: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Last iterates of the shift-register construction, shape (n, T).

    Each step moves coordinate i to i+1 scaled by ``v``, clears the first
    coordinate, then adds the canary's unit signal (if sampled) and N(0, sigma^2)
    noise to every coordinate.
    """
    m = np.zeros((n, T))
    bits = np.zeros((n, T), dtype=bool)
    for t in range(T):
        shifted = np.zeros_like(m)
        shifted[:, 1:] = v * m[:, :-1]
        present = (rng.random(n) < p) if with_canary else np.zeros(n, dtype=bool)
        bits[:, t] = present
        shifted[:, 0] += present
        m = shifted + sigma * rng.standard_normal((n, T))
    return m, bits


def history_register_run(T: int, p: float, sigma: float, v: float, with_canary: bool, seed: int) -> EncoderTrace:
    rng = np.random.Generator(np.random.Philox(seed))
    m, bits = simulate_history_register(T, p, sigma, v, with_canary, rng)
    return EncoderTrace(m[0], bits[0], with_canary)


def decode_history(trace: EncoderTrace, v: float) -> np.ndarray:
    """Scaled coordinates v^(1-i) m_{T,i}, i = 1..T.

    Coordinate i is an unbiased estimate of the presence bit of step T-i+1,
    so the result lists the history newest first.
    """
    m = np.asarray(trace.final_model, dtype=float)
    i = np.arange(1, m.shape[-1] + 1)
    return m * float(v) ** (1.0 - i)


def history_estimate_variance(sigma: float, v: float, i: int) -> float:
    """Variance of the i-th decoded coordinate: sigma^2 (1 - v^-2i) / (1 - v^-2)."""
    if v == 1.0:
        return sigma**2 * i
    return sigma**2 * (1.0 - v ** (-2 * i)) / (1.0 - v ** (-2))
