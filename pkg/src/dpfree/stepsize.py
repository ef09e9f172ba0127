"""Learning-rate control from privatized loss probes.

Every probe event releases the current-batch loss at three points along the
descent direction d: the current iterate w, the trial iterate w - eta * d,
and the mirrored iterate w + eta * d. A quadratic through those values gives
a one-dimensional model of the loss along d:

  slope     b = (l_minus - l_plus) / (2 * eta)        ~  d . grad
  curvature a = (l_plus + l_minus - 2 * l_zero) / eta^2  ~  d . H d

(l_plus is the loss after the trial step, l_minus after the mirrored step.)
When both are positive the minimizer of the quadratic, eta_star = b / a, is
a trust-region-free Newton step length; the learning rate moves to eta_star
clamped to a multiplicative band around its previous value. Otherwise the
rate is left alone. The loss-clip threshold feeds on the same three values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

LOSS_CLIP_FLOOR = 1e-3


@dataclass(frozen=True)
class LossProbe:
    """Three privatized loss values straddling the iterate along the direction."""

    eta_probe: float
    l_minus: float  # at w + eta * d (backward trial)
    l_zero: float   # at w
    l_plus: float   # at w - eta * d (forward trial)
    loss_clip_used: float

    def __post_init__(self):
        if not self.eta_probe > 0:
            raise ValueError(f"eta_probe must be positive, got {self.eta_probe}")


@dataclass(frozen=True)
class QuadFit:
    slope: float
    curvature: float
    eta_star: float | None  # present only when slope > 0 and curvature > 0


@dataclass(frozen=True)
class LrState:
    eta: float
    loss_clip: float
    updates_seen: int = 0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not self.loss_clip > 0:
            raise ValueError(f"loss_clip must be positive, got {self.loss_clip}")


def fit_quadratic(probe: LossProbe) -> QuadFit:
    """Finite-difference slope and curvature along the probe direction."""
    eta = probe.eta_probe
    slope = (probe.l_minus - probe.l_plus) / (2.0 * eta)
    curvature = (probe.l_plus + probe.l_minus - 2.0 * probe.l_zero) / (eta * eta)
    eta_star: float | None = None
    if math.isfinite(slope) and math.isfinite(curvature):
        if slope > 0 and curvature > 0:
            eta_star = slope / curvature
    return QuadFit(slope=slope, curvature=curvature, eta_star=eta_star)


def update_lr(state: LrState, fit: QuadFit, growth_cap: float = 10.0) -> LrState:
    """Move eta to the fitted step length, clamped to eta * [1/cap, cap].

    A fit without a usable minimizer (negative slope or curvature, or
    non-finite inputs) keeps the rate unchanged. Either way the event counts
    toward updates_seen.
    """
    if not growth_cap >= 1:
        raise ValueError(f"growth_cap must be at least 1, got {growth_cap}")
    eta = state.eta
    if fit.eta_star is not None:
        eta = min(max(fit.eta_star, state.eta / growth_cap), state.eta * growth_cap)
    return replace(state, eta=eta, updates_seen=state.updates_seen + 1)


def update_loss_clip(state: LrState, probe: LossProbe, rule: str = "sum",
                     floor: float = LOSS_CLIP_FLOOR) -> LrState:
    """Refresh the loss-clip threshold from the probe's released values.

    "sum" tracks l_minus + l_zero + l_plus, a deliberate overestimate of the
    loss scale so the next releases clip rarely; "last" tracks l_zero alone.
    A non-finite candidate keeps the previous threshold.
    """
    if not floor > 0:
        raise ValueError(f"floor must be positive, got {floor}")
    if rule == "sum":
        candidate = probe.l_minus + probe.l_zero + probe.l_plus
    elif rule == "last":
        candidate = probe.l_zero
    else:
        raise ValueError(f"unknown loss_clip rule {rule!r}")
    if not math.isfinite(candidate):
        return state
    return replace(state, loss_clip=max(candidate, floor))
