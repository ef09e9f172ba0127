"""Privatized releases: per-sample-clipped gradients and clipped loss means.

Both mechanisms take a batch of per-sample quantities, bound each sample's
contribution, and add calibrated noise scaled by the contribution bound:

  automatic gradient:  ( sum_i g_i / max(|g_i|, tau) + sigma_g * z ) / B
  fixed-threshold:     ( sum_i min(R/|g_i|, 1) * g_i + sigma_g * R * z ) / B
  loss mean:           ( sum_i min(R_l/|L_i|, 1) * L_i + sigma_l * R_l * zeta ) / B

z is a standard normal vector and zeta a standard normal (or standard
Laplace) scalar. Callers pass an explicit numpy Generator; a mechanism never
owns randomness, which keeps noise streams separable at the training layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_FLOOR = 1e-12  # zero-gradient guard for the automatic normalizer


@dataclass(frozen=True)
class PerSampleBatch:
    """Per-sample losses (B,) and gradients (B, d) from one forward/backward."""

    losses: np.ndarray
    gradients: np.ndarray

    def __post_init__(self):
        losses = np.asarray(self.losses, dtype=np.float64)
        gradients = np.asarray(self.gradients, dtype=np.float64)
        if losses.ndim != 1 or gradients.ndim != 2:
            raise ValueError(
                f"expected losses (B,) and gradients (B, d), got "
                f"{losses.shape} and {gradients.shape}"
            )
        if losses.shape[0] != gradients.shape[0]:
            raise ValueError(
                f"batch mismatch: {losses.shape[0]} losses, "
                f"{gradients.shape[0]} gradient rows"
            )
        if losses.shape[0] == 0:
            raise ValueError("batch must be non-empty")
        object.__setattr__(self, "losses", losses)
        object.__setattr__(self, "gradients", gradients)

    @property
    def size(self) -> int:
        return self.losses.shape[0]


@dataclass(frozen=True)
class PrivatizedGradient:
    value: np.ndarray
    sigma_g: float
    clip_mode: str
    clip_threshold: float | None = None


@dataclass(frozen=True)
class PrivatizedLoss:
    value: float
    loss_clip: float
    sigma_l: float
    noise_kind: str


def clip_factor(value: float, threshold: float) -> float:
    """min(threshold / |value|, 1), with factor 1 at value = 0."""
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    magnitude = abs(value)
    if magnitude <= threshold:
        return 1.0
    return threshold / magnitude


def privatize_gradient_auto(batch: PerSampleBatch, sigma_g: float,
                            rng: np.random.Generator) -> PrivatizedGradient:
    """Normalize every per-sample gradient to unit norm, average, add noise.

    Each summand has norm at most 1, so the Gaussian noise needs no
    threshold factor. Gradients with norm below NORM_FLOOR stay (near) zero
    instead of blowing up.
    """
    if sigma_g < 0:
        raise ValueError(f"sigma_g must be non-negative, got {sigma_g}")
    grads = batch.gradients
    norms = np.linalg.norm(grads, axis=1)
    scale = 1.0 / np.maximum(norms, NORM_FLOOR)
    total = grads.T @ scale
    noise = sigma_g * rng.standard_normal(grads.shape[1])
    return PrivatizedGradient(value=(total + noise) / batch.size,
                              sigma_g=sigma_g, clip_mode="automatic")


def privatize_gradient_fixed(batch: PerSampleBatch, clip_threshold: float,
                             sigma_g: float,
                             rng: np.random.Generator) -> PrivatizedGradient:
    """Clip per-sample gradients at a fixed norm threshold, average, add noise."""
    if not clip_threshold > 0:
        raise ValueError(f"clip_threshold must be positive, got {clip_threshold}")
    if sigma_g < 0:
        raise ValueError(f"sigma_g must be non-negative, got {sigma_g}")
    grads = batch.gradients
    norms = np.linalg.norm(grads, axis=1)
    scale = np.minimum(clip_threshold / np.maximum(norms, NORM_FLOOR), 1.0)
    total = grads.T @ scale
    noise = sigma_g * clip_threshold * rng.standard_normal(grads.shape[1])
    return PrivatizedGradient(value=(total + noise) / batch.size,
                              sigma_g=sigma_g, clip_mode="fixed",
                              clip_threshold=clip_threshold)


def privatize_loss(losses: np.ndarray, loss_clip: float, sigma_l: float,
                   rng: np.random.Generator,
                   noise_kind: str = "gaussian") -> PrivatizedLoss:
    """Release the batch-mean loss with per-sample magnitude clipping.

    value = ( sum_i min(loss_clip/|L_i|, 1) * L_i + sigma_l * loss_clip * zeta ) / B

    The clip factor uses |L_i| so a negative loss is shrunk toward zero, never
    sign-flipped. zeta is standard normal for "gaussian" and standard Laplace
    (unit scale) for "laplace"; either way the noise scale on the released
    mean is sigma_l * loss_clip / B.
    """
    if not loss_clip > 0:
        raise ValueError(f"loss_clip must be positive, got {loss_clip}")
    if sigma_l < 0:
        raise ValueError(f"sigma_l must be non-negative, got {sigma_l}")
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or losses.shape[0] == 0:
        raise ValueError(f"losses must be a non-empty vector, got shape {losses.shape}")
    if noise_kind == "gaussian":
        zeta = rng.standard_normal()
    elif noise_kind == "laplace":
        zeta = rng.laplace(0.0, 1.0)
    else:
        raise ValueError(f"unknown noise_kind {noise_kind!r}")
    magnitudes = np.abs(losses)
    scale = np.where(magnitudes > loss_clip, loss_clip / np.maximum(magnitudes, NORM_FLOOR), 1.0)
    total = float(scale @ losses)
    value = (total + sigma_l * loss_clip * zeta) / losses.shape[0]
    return PrivatizedLoss(value=float(value), loss_clip=loss_clip,
                          sigma_l=sigma_l, noise_kind=noise_kind)
