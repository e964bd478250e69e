"""Gauss-Hermite rules for one-dimensional Gaussian expectations.

Full-line rules come straight from numpy. For activations with a kink at
zero (ReLU), the full-line rule only converges algebraically, so we also
provide the Gauss rule for the Hermite weight exp(-x^2) restricted to
[0, inf). Its recurrence coefficients are computed once per order from the
half-line moments Gamma((k+1)/2)/2 using the Chebyshev algorithm in high
precision, then cached as float64 nodes and weights.
"""

from __future__ import annotations

import functools

import mpmath as mp
import numpy as np


@functools.lru_cache(maxsize=None)
def full_rule(order: int):
    """Nodes and weights for integral of f(x) exp(-x^2) over the real line."""
    if order < 1:
        raise ValueError(f"quadrature order must be >= 1, got {order}")
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    return nodes, weights


@functools.lru_cache(maxsize=None)
def half_rule(order: int):
    """Nodes and weights for integral of f(x) exp(-x^2) over [0, inf)."""
    if order < 1:
        raise ValueError(f"quadrature order must be >= 1, got {order}")
    # working precision grows with order; the Hankel systems involved are
    # severely ill-conditioned in double precision
    prec = max(60, 4 * order)
    with mp.workdps(prec):
        moments = [mp.gamma(mp.mpf(k + 1) / 2) / 2 for k in range(2 * order)]
        alpha = [mp.mpf(0)] * order
        beta = [mp.mpf(0)] * order
        sig_prev = [mp.mpf(0)] * (2 * order + 1)
        sig_cur = list(moments) + [mp.mpf(0)]
        alpha[0] = moments[1] / moments[0]
        beta[0] = moments[0]
        for k in range(1, order):
            sig_next = [mp.mpf(0)] * (2 * order + 1)
            for l in range(k, 2 * order - k):
                sig_next[l] = (
                    sig_cur[l + 1] - alpha[k - 1] * sig_cur[l] - beta[k - 1] * sig_prev[l]
                )
            alpha[k] = sig_next[k + 1] / sig_next[k] - sig_cur[k] / sig_cur[k - 1]
            beta[k] = sig_next[k] / sig_cur[k - 1]
            sig_prev, sig_cur = sig_cur, sig_next
        J = mp.zeros(order)
        for i in range(order):
            J[i, i] = alpha[i]
        for i in range(1, order):
            off = mp.sqrt(beta[i])
            J[i - 1, i] = off
            J[i, i - 1] = off
        eigval, eigvec = mp.eigsy(J)
        nodes = np.array([float(eigval[i]) for i in range(order)])
        weights = np.array([float(beta[0] * eigvec[0, i] ** 2) for i in range(order)])
    idx = np.argsort(nodes)
    return nodes[idx], weights[idx]


def gaussian_moments(sigma_fn, scales: np.ndarray, order: int, split_at_zero: bool = False):
    """First and second moments of sigma(z) for z ~ N(0, s^2), per scale s.

    Returns (E[sigma(z)], E[sigma(z)^2]) as arrays aligned with `scales`.
    With split_at_zero the expectation is computed separately on each
    half-line with order//2 nodes per side, which restores spectral accuracy
    for integrands that are smooth away from zero.
    """
    scales = np.atleast_1d(np.asarray(scales, dtype=np.float64))
    if split_at_zero:
        nodes, weights = half_rule(max(order // 2, 1))
        z_pos = np.sqrt(2.0) * scales[:, None] * nodes[None, :]
        vals = np.concatenate([sigma_fn(z_pos), sigma_fn(-z_pos)], axis=1)
        w = np.concatenate([weights, weights]) / np.sqrt(np.pi)
    else:
        nodes, weights = full_rule(order)
        vals = sigma_fn(np.sqrt(2.0) * scales[:, None] * nodes[None, :])
        w = weights / np.sqrt(np.pi)
    return vals @ w, (vals**2) @ w
