"""Gaussian helpers and clipping-bias oracles for the private loss release.

Clipping a per-sample loss at a threshold R biases the released batch mean
downward. For losses modeled as N(mean, spread^2) the bias has a closed form
in terms of the standard normal pdf/cdf, and for arbitrary loss distributions
it can be estimated by Monte Carlo. Both estimators live here, together with
the standard normal pdf/cdf they are built from.
"""

from __future__ import annotations

import numpy as np
from scipy import special

_SQRT2 = np.sqrt(2.0)
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def normal_pdf(x):
    """Standard normal density, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return float(out) if out.ndim == 0 else out


def normal_cdf(x):
    """Standard normal CDF via the complementary error function.

    Phi(x) = erfc(-x / sqrt(2)) / 2. Accurate to well under 1e-12 in
    absolute terms over the whole real line, and symmetric:
    Phi(-x) = 1 - Phi(x) up to rounding.
    """
    x = np.asarray(x, dtype=np.float64)
    out = 0.5 * special.erfc(-x / _SQRT2)
    return float(out) if out.ndim == 0 else out


def _inverse_mills(alpha):
    # phi(a) / (1 - Phi(a)), computed through the scaled complementary
    # error function so the ratio stays finite for large alpha.
    return _SQRT_2_OVER_PI / special.erfcx(alpha / _SQRT2)


def tail_mean(mean, spread, threshold):
    """E[L | L > threshold] for L ~ N(mean, spread^2).

    Equals mean + spread * phi(alpha) / (1 - Phi(alpha)) with
    alpha = (threshold - mean) / spread.
    """
    if spread <= 0:
        raise ValueError(f"spread must be positive, got {spread}")
    alpha = (threshold - mean) / spread
    return mean + spread * float(_inverse_mills(alpha))


def tail_probability(mean, spread, threshold):
    """P(L > threshold) for L ~ N(mean, spread^2)."""
    if spread <= 0:
        raise ValueError(f"spread must be positive, got {spread}")
    alpha = (threshold - mean) / spread
    return float(0.5 * special.erfc(alpha / _SQRT2))


def clipping_bias_analytic(mean, spread, threshold):
    """Expected clipping bias E[max(L - threshold, 0)] for normal losses.

    For L ~ N(mean, spread^2) and alpha = (threshold - mean) / spread:

        bias = spread * (phi(alpha) - alpha * (1 - Phi(alpha)))

    evaluated here in the algebraically identical factored form
    (1 - Phi(alpha)) * (inverse_mills(alpha) - alpha) * spread, which does
    not cancel for deep tails. The bias is strictly decreasing in the
    threshold and equals (E[L | L > R] - R) * P(L > R).
    """
    if spread <= 0:
        raise ValueError(f"spread must be positive, got {spread}")
    alpha = (threshold - mean) / spread
    tail = 0.5 * special.erfc(alpha / _SQRT2)
    return float(spread * tail * (_inverse_mills(alpha) - alpha))


def clipping_bias_empirical(sample_losses, threshold, batch_size, trials, rng):
    """Monte Carlo estimate of the per-batch clipping bias, with its SE.

    ``sample_losses(rng, size)`` draws iid losses. Each trial simulates one
    batch and records mean(max(L_i - threshold, 0)); the function returns the
    average over ``trials`` batches and its standard error. With the noise
    term switched off this is exactly |E[released mean] - E[true mean]|.
    """
    if batch_size < 1 or trials < 1:
        raise ValueError("batch_size and trials must be at least 1")
    losses = sample_losses(rng, (trials, batch_size))
    per_batch = np.maximum(losses - threshold, 0.0).mean(axis=1)
    estimate = float(per_batch.mean())
    stderr = float(per_batch.std(ddof=1) / np.sqrt(trials)) if trials > 1 else float("inf")
    return estimate, stderr
