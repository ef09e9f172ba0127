"""Privacy accounting for noisy gradient descent with private loss probes.

The training loop makes two kinds of releases: one privatized gradient per
step (T total) and, every K-th step, three privatized loss values (3T/K
total). Each release family is a subsampled Gaussian mechanism tracked in the
Gaussian-DP parameter mu, where an n-release family run at sampling rate B/N
and noise multiplier sigma satisfies

    mu = (B/N) * sqrt(n * (e^{1/sigma^2} - 1))

and independent families compose by mu = sqrt(mu_a^2 + mu_b^2). A mu-GDP
guarantee converts to (epsilon, delta)-DP through

    delta = Phi(-eps/mu + mu/2) - e^eps * Phi(-eps/mu - mu/2)

which is monotone in both arguments, so all inversions here are
one-dimensional root finds on monotone functions.

``solve_noise_plan`` splits a target budget between the two families: the
gradient noise is a small multiple gamma of the single-family calibration
(so almost all budget protects gradients) and the loss noise is then solved
so the composed guarantee lands exactly on the target.

The solver works through the accountant interface ``epsilon_fn(sigma, spec,
delta)`` (strictly decreasing in sigma), so a different accountant for the
gradient family can be plugged in without touching the calibration code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy import optimize, special

SIGMA_BRACKET = (0.3, 1e8)
MU_BRACKET = (1e-6, 1e8)
EPS_BRACKET = (0.0, 1e8)
MAX_ROOT_ITER = 200
PLAN_REL_TOL = 1e-6  # relative tolerance on epsilon for a solved plan


class AccountingError(ValueError):
    """Base class for calibration failures."""


class CalibrationRangeError(AccountingError):
    """A root find left its bracket or a formula left float range."""


class InfeasiblePlanError(AccountingError):
    """The requested split leaves no budget for the loss release."""


@dataclass(frozen=True)
class PrivacyBudget:
    """Target (epsilon, delta) guarantee for one training run."""

    epsilon: float
    delta: float

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive and finite, got {self.epsilon}")
        if not (0 < self.delta < 1):
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class SamplingSpec:
    """Release schedule: batch size B, dataset size N, steps T, probe interval K."""

    batch_size: int
    dataset_size: int
    steps: int
    interval: int = 5

    def __post_init__(self):
        if not 1 <= self.batch_size <= self.dataset_size:
            raise ValueError(
                f"need 1 <= batch_size <= dataset_size, got "
                f"{self.batch_size} and {self.dataset_size}"
            )
        if self.steps < 1:
            raise ValueError(f"steps must be at least 1, got {self.steps}")
        if not 1 <= self.interval <= self.steps:
            raise ValueError(
                f"need 1 <= interval <= steps, got {self.interval} and {self.steps}"
            )

    @property
    def rate(self) -> float:
        """Sampling rate B/N."""
        return self.batch_size / self.dataset_size

    @property
    def loss_releases(self) -> float:
        """Budgeted loss release count 3T/K (continuous by convention)."""
        return 3.0 * self.steps / self.interval


@dataclass(frozen=True)
class NoisePlan:
    """Calibrated noise multipliers for one run."""

    sigma_g: float
    sigma_l: float
    gamma: float
    interval: int

    def __post_init__(self):
        if not self.sigma_g > 0:
            raise ValueError(f"sigma_g must be positive, got {self.sigma_g}")
        if not self.sigma_l > 0:
            raise ValueError(f"sigma_l must be positive, got {self.sigma_l}")
        if not 1.0 <= self.gamma <= 1.1:
            raise ValueError(f"gamma must lie in [1, 1.1], got {self.gamma}")
        if self.interval < 1:
            raise ValueError(f"interval must be at least 1, got {self.interval}")


def _mu_for_releases(sigma: float, rate: float, releases: float) -> float:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    try:
        grown = math.expm1(1.0 / (sigma * sigma))
    except OverflowError:
        raise CalibrationRangeError(
            f"e^(1/sigma^2) overflows for sigma={sigma}"
        ) from None
    mu = rate * math.sqrt(releases * grown)
    if not math.isfinite(mu):
        raise CalibrationRangeError(f"mu is not finite for sigma={sigma}")
    return mu


def mu_gradient(sigma: float, spec: SamplingSpec) -> float:
    """mu of the T-release gradient family at noise multiplier sigma."""
    return _mu_for_releases(sigma, spec.rate, float(spec.steps))


def mu_loss(sigma_l: float, spec: SamplingSpec) -> float:
    """mu of the 3T/K-release loss family at noise multiplier sigma_l."""
    return _mu_for_releases(sigma_l, spec.rate, spec.loss_releases)


def compose_mu(*mus: float) -> float:
    """mu of independent mu-GDP mechanisms run together: sqrt(sum mu_k^2)."""
    if any(m < 0 for m in mus):
        raise ValueError(f"mu values must be non-negative, got {mus}")
    return math.sqrt(math.fsum(m * m for m in mus))


def mu_to_delta(mu: float, epsilon: float) -> float:
    """Smallest delta such that mu-GDP implies (epsilon, delta)-DP.

    The e^eps term is evaluated in log space (via log of the normal CDF)
    so the conversion stays finite for any epsilon.
    """
    if mu < 0:
        raise ValueError(f"mu must be non-negative, got {mu}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    if mu == 0.0:
        return 0.0
    head = special.ndtr(-epsilon / mu + mu / 2.0)
    log_tail = epsilon + special.log_ndtr(-epsilon / mu - mu / 2.0)
    delta = float(head - math.exp(log_tail))
    return min(max(delta, 0.0), 1.0)


def _bracketed_root(f, lo: float, hi: float, what: str) -> float:
    f_lo, f_hi = f(lo), f(hi)
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    if f_lo * f_hi > 0:
        raise CalibrationRangeError(
            f"{what}: no sign change on [{lo:g}, {hi:g}] "
            f"(f(lo)={f_lo:.3g}, f(hi)={f_hi:.3g})"
        )
    return float(optimize.brentq(f, lo, hi, maxiter=MAX_ROOT_ITER, xtol=1e-300, rtol=1e-15))


def mu_to_epsilon(mu: float, delta: float) -> float:
    """Epsilon of a mu-GDP mechanism at a fixed delta."""
    if mu < 0:
        raise ValueError(f"mu must be non-negative, got {mu}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if mu == 0.0 or mu_to_delta(mu, 0.0) <= delta:
        return 0.0
    lo, hi = EPS_BRACKET
    # grow the upper end until the target delta is bracketed
    probe = 1.0
    while mu_to_delta(mu, probe) > delta:
        probe *= 2.0
        if probe > hi:
            raise CalibrationRangeError(
                f"epsilon above {hi:g} still gives delta > {delta:g} at mu={mu:g}"
            )
    return _bracketed_root(lambda e: mu_to_delta(mu, e) - delta, lo, probe,
                           "epsilon for mu")


def budget_to_mu(budget: PrivacyBudget) -> float:
    """The mu whose guarantee converts exactly to the given (epsilon, delta)."""
    lo, hi = MU_BRACKET
    f = lambda m: mu_to_delta(m, budget.epsilon) - budget.delta
    expansions = 0
    while f(lo) > 0:
        lo /= 100.0
        expansions += 1
        if expansions > 50:
            raise CalibrationRangeError(f"mu bracket exhausted below {MU_BRACKET[0]:g}")
    return _bracketed_root(f, lo, hi, "mu for budget")


def gradient_epsilon(sigma: float, spec: SamplingSpec, delta: float) -> float:
    """Accountant interface: epsilon of the gradient family alone.

    Strictly decreasing in sigma. This is the default accountant used by
    ``calibrate_sigma``; alternatives must keep the same monotonicity.
    """
    return mu_to_epsilon(mu_gradient(sigma, spec), delta)


def calibrate_sigma(budget: PrivacyBudget, spec: SamplingSpec, epsilon_fn=None) -> float:
    """Smallest noise multiplier whose epsilon meets the budget exactly.

    Solves epsilon_fn(sigma, spec, delta) = epsilon over the standard sigma
    bracket. The default accountant is the Gaussian-DP one above.
    """
    fn = gradient_epsilon if epsilon_fn is None else epsilon_fn
    lo, hi = SIGMA_BRACKET
    f = lambda s: fn(s, spec, budget.delta) - budget.epsilon
    return _bracketed_root(f, lo, hi, "sigma for budget")


def solve_noise_plan(budget: PrivacyBudget, spec: SamplingSpec,
                     gamma: float = 1.01) -> NoisePlan:
    """Split one budget across gradient and loss releases.

    sigma_g is gamma times the gradient-only calibration; sigma_l is then
    solved so the composed guarantee re-converts to the target (epsilon,
    delta) within PLAN_REL_TOL relative on epsilon. gamma = 1 leaves a zero
    residual for the loss family and raises InfeasiblePlanError.
    """
    if not 1.0 <= gamma <= 1.1:
        raise ValueError(f"gamma must lie in [1, 1.1], got {gamma}")
    mu_total = budget_to_mu(budget)
    sigma = calibrate_sigma(budget, spec)
    sigma_g = gamma * sigma
    mu_g = mu_gradient(sigma_g, spec)
    residual_sq = mu_total * mu_total - mu_g * mu_g
    if residual_sq <= (mu_total * mu_total) * 1e-12:
        raise InfeasiblePlanError(
            f"gamma={gamma} leaves no loss budget "
            f"(mu_total={mu_total:.6g}, mu_gradient={mu_g:.6g})"
        )
    mu_l_target = math.sqrt(residual_sq)
    lo, hi = SIGMA_BRACKET
    sigma_l = _bracketed_root(lambda s: mu_loss(s, spec) - mu_l_target, lo, hi,
                              "sigma_l for residual budget")
    plan = NoisePlan(sigma_g=sigma_g, sigma_l=sigma_l, gamma=gamma,
                     interval=spec.interval)
    realized = realized_epsilon(plan, spec, budget.delta)
    if abs(realized - budget.epsilon) > PLAN_REL_TOL * budget.epsilon:
        raise CalibrationRangeError(
            f"plan re-converts to epsilon={realized:.9g}, "
            f"target was {budget.epsilon:.9g}"
        )
    return plan


def realized_epsilon(plan: NoisePlan, spec: SamplingSpec, delta: float) -> float:
    """Epsilon actually spent by a plan, at the given delta."""
    mu = compose_mu(mu_gradient(plan.sigma_g, spec), mu_loss(plan.sigma_l, spec))
    return mu_to_epsilon(mu, delta)


def plan_report(plan: NoisePlan, budget: PrivacyBudget, spec: SamplingSpec) -> dict:
    """Flat summary of a solved plan: mu decomposition and budget shares."""
    mu_g = mu_gradient(plan.sigma_g, spec)
    mu_l = mu_loss(plan.sigma_l, spec)
    mu_total = compose_mu(mu_g, mu_l)
    return {
        "epsilon": budget.epsilon,
        "delta": budget.delta,
        "sigma_g": plan.sigma_g,
        "sigma_l": plan.sigma_l,
        "gamma": plan.gamma,
        "interval": plan.interval,
        "mu_gradient": mu_g,
        "mu_loss": mu_l,
        "mu_total": mu_total,
        "epsilon_realized": mu_to_epsilon(mu_total, budget.delta),
        "loss_budget_share": 1.0 - (mu_g / mu_total) ** 2,
        "gradient_releases": spec.steps,
        "loss_releases_budgeted": spec.loss_releases,
    }


def default_delta(dataset_size: int) -> float:
    """Cryptographically small default: N^{-1.1}."""
    if dataset_size < 2:
        raise ValueError(f"dataset_size must be at least 2, got {dataset_size}")
    return float(dataset_size) ** -1.1
