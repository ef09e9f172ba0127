"""Differentially private training loop with automatic learning-rate control.

One step does, in order:

  1. forward/backward on the next minibatch (one forward pass)
  2. privatized gradient release (automatic normalization or fixed clipping)
  3. optimizer direction from the released gradient (sgd or adamw)
  4. on probe steps (t % interval == 0): release the clipped batch loss at
     the current iterate and at the two trial points w -/+ eta * direction
     (two extra forward passes), fit the quadratic, update eta, then update
     the loss-clip threshold
  5. parameter update w <- w - eta * direction with the refreshed eta

Reproducibility contract: all randomness derives from a single seed through
four spawned substreams, in spawn order: parameter init, batch shuffling,
gradient noise, loss noise. Noise is drawn on every release even when its
sigma is zero, so a run's stream positions do not depend on noise levels,
and loss draws never perturb gradient noise or batch order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .accounting import (
    AccountingError,
    NoisePlan,
    PrivacyBudget,
    SamplingSpec,
    calibrate_sigma,
    solve_noise_plan,
)
from .mechanisms import (
    PerSampleBatch,
    privatize_gradient_auto,
    privatize_gradient_fixed,
    privatize_loss,
)
from .stepsize import (
    LOSS_CLIP_FLOOR,
    LossProbe,
    LrState,
    fit_quadratic,
    update_loss_clip,
    update_lr,
)

STREAM_NAMES = ("init", "batches", "gradient_noise", "loss_noise")


class DivergenceError(RuntimeError):
    """Raised when losses, gradients, or parameters go non-finite."""

    def __init__(self, step: int, trace: list):
        super().__init__(f"training diverged at step {step}")
        self.step = step
        self.trace = trace


@dataclass(frozen=True)
class TrainerConfig:
    steps: int
    batch_size: int
    budget: PrivacyBudget | None = None
    gamma: float = 1.01
    interval: int = 5
    optimizer: str = "adamw"
    clip_mode: str = "automatic"
    clip_threshold: float | None = None
    noise_kind: str = "gaussian"
    eta0: float = 1e-4
    loss_clip0: float = 1.0
    growth_cap: float = 10.0
    loss_clip_rule: str = "sum"
    loss_clip_floor: float = LOSS_CLIP_FLOOR
    auto_lr: bool = True
    seed: int = 0
    track_true_loss: bool = True
    eval_every: int = 0
    noise_plan: NoisePlan | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be positive, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.clip_mode not in ("automatic", "fixed"):
            raise ValueError(f"unknown clip_mode {self.clip_mode!r}")
        if self.clip_mode == "fixed":
            if self.clip_threshold is None or not self.clip_threshold > 0:
                raise ValueError("fixed clip_mode needs a positive clip_threshold")
        if self.noise_kind not in ("gaussian", "laplace"):
            raise ValueError(f"unknown noise_kind {self.noise_kind!r}")
        if not self.eta0 > 0:
            raise ValueError(f"eta0 must be positive, got {self.eta0}")
        if not self.loss_clip0 > 0:
            raise ValueError(f"loss_clip0 must be positive, got {self.loss_clip0}")
        if self.interval < 1:
            raise ValueError(f"interval must be positive, got {self.interval}")
        if self.eval_every < 0:
            raise ValueError(f"eval_every must be non-negative, got {self.eval_every}")


@dataclass(frozen=True)
class TraceRow:
    step: int
    eta: float
    loss_clip: float
    priv_loss: float
    true_loss: float
    test_metric: float
    fwd_passes: int


@dataclass(frozen=True)
class RunResult:
    params: np.ndarray
    trace: list[TraceRow]
    sampling: SamplingSpec
    plan: NoisePlan | None
    sigma_g: float
    sigma_l: float
    gradient_releases: int
    loss_releases: int
    forward_passes: int
    final_metric: float | None
    metric_name: str

    def eta_series(self) -> np.ndarray:
        return np.array([row.eta for row in self.trace])


def spawn_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent substreams for init, batching, and the two noise sources."""
    children = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))
    return {name: np.random.default_rng(child)
            for name, child in zip(STREAM_NAMES, children)}


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Sequential minibatches over a fresh permutation each epoch, dropping
    any short final batch."""
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds {n} training rows")
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]


class _Sgd:
    def __init__(self, dim: int):
        pass

    def direction(self, grad: np.ndarray, params: np.ndarray) -> np.ndarray:
        return grad


class _AdamW:
    """Adam moments on the released gradient plus decoupled weight decay.

    Hyperparameters are fixed on purpose: the point of the trainer is that
    the learning rate is the only schedule, and it is found automatically.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    WEIGHT_DECAY = 0.01
    EPS = 1e-8

    def __init__(self, dim: int):
        self.t = 0
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)

    def direction(self, grad: np.ndarray, params: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.BETA1 * self.m + (1.0 - self.BETA1) * grad
        self.v = self.BETA2 * self.v + (1.0 - self.BETA2) * grad * grad
        m_hat = self.m / (1.0 - self.BETA1 ** self.t)
        v_hat = self.v / (1.0 - self.BETA2 ** self.t)
        return m_hat / (np.sqrt(v_hat) + self.EPS) + self.WEIGHT_DECAY * params


def _resolve_noise(config: TrainerConfig,
                   spec: SamplingSpec) -> tuple[float, float, NoisePlan | None]:
    """Pick (sigma_g, sigma_l, plan) for the run.

    Explicit plan > solved plan from budget > no noise. Without automatic
    learning rates there are no loss releases, so the whole budget goes to
    the gradient at gamma = 1.
    """
    if config.noise_plan is not None:
        plan = config.noise_plan
        if plan.interval != spec.interval:
            raise AccountingError(
                f"noise plan was solved for interval {plan.interval}, "
                f"run uses {spec.interval}")
        return plan.sigma_g, plan.sigma_l, plan
    if config.budget is None:
        return 0.0, 0.0, None
    if config.auto_lr:
        plan = solve_noise_plan(config.budget, spec, gamma=config.gamma)
        return plan.sigma_g, plan.sigma_l, plan
    return calibrate_sigma(config.budget, spec), 0.0, None


def train(model, data, config: TrainerConfig,
          initial_params: np.ndarray | None = None) -> RunResult:
    X_train, y_train = data.train_arrays()
    X_test, y_test = data.test_arrays()
    n = X_train.shape[0]
    interval = min(config.interval, config.steps)
    spec = SamplingSpec(batch_size=config.batch_size, dataset_size=n,
                        steps=config.steps, interval=interval)
    sigma_g, sigma_l, plan = _resolve_noise(config, spec)

    streams = spawn_streams(config.seed)
    if initial_params is None:
        w = model.init_params(streams["init"])
    else:
        w = np.array(initial_params, dtype=np.float64)
        if w.shape != (model.dim,):
            raise ValueError(
                f"initial_params must have shape ({model.dim},), got {w.shape}")

    optimizer = _AdamW(model.dim) if config.optimizer == "adamw" else _Sgd(model.dim)
    state = LrState(eta=config.eta0, loss_clip=config.loss_clip0)
    batches = iterate_batches(n, config.batch_size, streams["batches"])

    trace: list[TraceRow] = []
    fwd = 0
    gradient_releases = 0
    loss_releases = 0
    last_released_loss = math.nan

    for t in range(config.steps):
        idx = next(batches)
        Xb, yb = X_train[idx], y_train[idx]
        losses, grads = model.per_sample(w, Xb, yb)
        fwd += 1
        if not (np.all(np.isfinite(losses)) and np.all(np.isfinite(grads))):
            raise DivergenceError(t, trace)

        batch = PerSampleBatch(losses=losses, gradients=grads)
        if config.clip_mode == "automatic":
            released = privatize_gradient_auto(
                batch, sigma_g, streams["gradient_noise"])
        else:
            released = privatize_gradient_fixed(
                batch, config.clip_threshold, sigma_g, streams["gradient_noise"])
        gradient_releases += 1
        direction = optimizer.direction(released.value, w)

        if config.auto_lr and t % interval == 0:
            # l_zero reuses this step's forward pass; the trial points cost
            # one forward each. Draw order on the loss stream: zero, plus,
            # minus. eta and loss_clip in the probe are the pre-update values.
            l_zero = privatize_loss(losses, state.loss_clip, sigma_l,
                                    streams["loss_noise"], config.noise_kind)
            plus_losses = model.losses(w - state.eta * direction, Xb, yb)
            fwd += 1
            l_plus = privatize_loss(plus_losses, state.loss_clip, sigma_l,
                                    streams["loss_noise"], config.noise_kind)
            minus_losses = model.losses(w + state.eta * direction, Xb, yb)
            fwd += 1
            l_minus = privatize_loss(minus_losses, state.loss_clip, sigma_l,
                                     streams["loss_noise"], config.noise_kind)
            loss_releases += 3
            last_released_loss = l_zero.value
            probe = LossProbe(eta_probe=state.eta, l_minus=l_minus.value,
                              l_zero=l_zero.value, l_plus=l_plus.value,
                              loss_clip_used=state.loss_clip)
            state = update_lr(state, fit_quadratic(probe), config.growth_cap)
            state = update_loss_clip(state, probe, config.loss_clip_rule,
                                     config.loss_clip_floor)

        w = w - state.eta * direction
        if not np.all(np.isfinite(w)):
            raise DivergenceError(t, trace)

        true_loss = float(np.mean(losses)) if config.track_true_loss else math.nan
        test_metric = math.nan
        if (config.eval_every > 0 and (t + 1) % config.eval_every == 0
                and y_test.size):
            test_metric = model.metric(w, X_test, y_test)
        trace.append(TraceRow(step=t, eta=state.eta, loss_clip=state.loss_clip,
                              priv_loss=last_released_loss, true_loss=true_loss,
                              test_metric=test_metric, fwd_passes=fwd))

    expected_loss_releases = (
        3 * math.ceil(config.steps / interval) if config.auto_lr else 0)
    if gradient_releases != config.steps or loss_releases != expected_loss_releases:
        raise AccountingError(
            f"release ledger out of balance: {gradient_releases} gradient "
            f"releases for {config.steps} steps, {loss_releases} loss "
            f"releases where {expected_loss_releases} were budgeted")

    final_metric = model.metric(w, X_test, y_test) if y_test.size else None
    return RunResult(params=w, trace=trace, sampling=spec, plan=plan,
                     sigma_g=sigma_g, sigma_l=sigma_l,
                     gradient_releases=gradient_releases,
                     loss_releases=loss_releases, forward_passes=fwd,
                     final_metric=final_metric, metric_name=model.metric_name)
