"""Independent reference computations used by the tests."""

import math

import numpy as np
from scipy import integrate, stats


def mixture_densities(shifts, probs, variance, n_grid=400_001, width=14.0):
    """Densities of P = sum w N(s, v) and Q = N(0, v) on a uniform grid."""
    sd = math.sqrt(variance)
    y = np.linspace(-width * sd, max(shifts) + width * sd, n_grid)
    q = stats.norm.pdf(y, scale=sd)
    p = np.zeros_like(y)
    for s, w in zip(shifts, probs):
        p += w * stats.norm.pdf(y, loc=s, scale=sd)
    return y, p, q


def trapezoid_delta(y, p, q, epsilon):
    """max of the two hockey-stick divergences by trapezoid integration."""
    e = math.exp(epsilon)
    pq = integrate.trapezoid(np.maximum(p - e * q, 0.0), y)
    qp = integrate.trapezoid(np.maximum(q - e * p, 0.0), y)
    return max(pq, qp)


def binomial_atoms(T, q):
    k = np.arange(T + 1)
    return k.astype(float), stats.binom.pmf(k, T, q)


def enumerate_quadratic(T, q, sigma, alpha):
    """Brute-force atoms of the quadratic counterexample over all 2^T patterns."""
    atoms = {}
    decay = [(1 - alpha) ** (T - t) for t in range(1, T + 1)]
    for mask in range(2**T):
        bits = [(mask >> j) & 1 for j in range(T)]
        shift = round(sum(b * d for b, d in zip(bits, decay)), 12)
        prob = math.prod(q if b else 1 - q for b in bits)
        atoms[shift] = atoms.get(shift, 0.0) + prob
    variance = sigma**2 * sum((1 - alpha) ** (2 * (i - 1)) for i in range(1, T + 1))
    return variance, sorted(atoms.items())
