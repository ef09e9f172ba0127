"""Experiment runner: config in, noise plan + trace.csv + summary.json out.

Artifacts are deterministic for a given config and seed (wall-clock fields
aside), so sweeps can be diffed byte-for-byte. Exit codes: 0 success,
1 usage error, 2 infeasible budget, 3 divergence (partial trace retained).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from .accounting import (
    AccountingError,
    CalibrationRangeError,
    InfeasiblePlanError,
    PrivacyBudget,
    SamplingSpec,
    default_delta,
    plan_report,
    solve_noise_plan,
)
from .models import build_model, load_csv, make_synthetic
from .training import DivergenceError, RunResult, TraceRow, TrainerConfig, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_DIVERGED = 3

TRACE_HEADER = "step,eta,r_l,priv_loss,true_loss,test_metric,fwd_passes"

# every recognized config key with its default; None means "must be resolved"
DEFAULTS: dict = {
    "epsilon": None,
    "delta": "auto",
    "model": "logistic",
    "dataset": "synthetic",
    "optimizer": "adamw",
    "k": 5,
    "gamma": 1.01,
    "steps": 500,
    "batch": 64,
    "seed": 0,
    "repeats": 1,
    "out": "dpfree_out",
    "clip_mode": "automatic",
    "clip_threshold": None,
    "noise_kind": "gaussian",
    "plan_only": False,
    "eta0": 1e-4,
    "loss_clip0": 1.0,
    "growth_cap": 10.0,
    "loss_clip_rule": "sum",
    "loss_clip_floor": 1e-3,
    "auto_lr": True,
    "track_true_loss": True,
    "eval_every": 0,
    "n_samples": 10000,
    "n_features": 20,
    "n_classes": 3,
    "hidden_units": 16,
    "noise_std": 0.1,
    "flip_rate": 0.05,
    "margin": 0.1,
    "feature_scale": 1.0,
    "test_fraction": 0.2,
    "data_seed": 0,
}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; we reserve 2 for infeasible
    budgets, so remap parser errors to the usage code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="dpfree",
        description="Differentially private training with automatic clipping "
                    "and automatic learning rates.")
    parser.add_argument("--config", type=str, default=None,
                        help="flat JSON config file; flags override its values")
    parser.add_argument("--epsilon", type=float, default=None,
                        help="privacy budget epsilon (required)")
    parser.add_argument("--delta", type=str, default=None,
                        help="privacy budget delta, or 'auto' for N^-1.1")
    parser.add_argument("--model", type=str, default=None,
                        choices=["logistic", "linear", "mlp", "bowl"])
    parser.add_argument("--dataset", type=str, default=None,
                        help="'synthetic' or a CSV path (features..., target)")
    parser.add_argument("--optimizer", type=str, default=None,
                        choices=["adamw", "sgd"])
    parser.add_argument("--k", type=int, default=None,
                        help="steps between learning-rate probe events")
    parser.add_argument("--gamma", type=float, default=None,
                        help="gradient noise inflation factor in (1, 1.1]")
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--batch", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--repeats", type=int, default=None,
                        help="number of seeds to sweep (seed, seed+1, ...)")
    parser.add_argument("--out", type=str, default=None,
                        help="output directory for trace.csv and summary.json")
    parser.add_argument("--clip-mode", type=str, default=None,
                        choices=["automatic", "fixed"], dest="clip_mode")
    parser.add_argument("--noise-kind", type=str, default=None,
                        choices=["gaussian", "laplace"], dest="noise_kind")
    parser.add_argument("--plan-only", action="store_true", default=False,
                        dest="plan_only",
                        help="print the solved noise plan and exit")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config is not None:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
            loaded = json.loads(text)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a flat JSON object")
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in DEFAULTS:
        if key == "config":
            continue
        value = getattr(args, key, None)
        if key == "plan_only":
            if value:
                cfg[key] = True
            continue
        if value is not None:
            cfg[key] = value
    if cfg["epsilon"] is None:
        raise UsageError("epsilon is required (flag --epsilon or config key)")
    cfg["epsilon"] = float(cfg["epsilon"])
    if isinstance(cfg["delta"], str) and cfg["delta"] != "auto":
        try:
            cfg["delta"] = float(cfg["delta"])
        except ValueError as exc:
            raise UsageError(f"delta must be a number or 'auto', got "
                             f"{cfg['delta']!r}") from exc
    for key in ("k", "steps", "batch", "seed", "repeats", "eval_every",
                "n_samples", "n_features", "n_classes", "hidden_units",
                "data_seed"):
        cfg[key] = int(cfg[key])
    for key in ("gamma", "eta0", "loss_clip0", "growth_cap", "loss_clip_floor",
                "noise_std", "flip_rate", "margin", "feature_scale",
                "test_fraction"):
        cfg[key] = float(cfg[key])
    if cfg["clip_threshold"] is not None:
        cfg["clip_threshold"] = float(cfg["clip_threshold"])
    if cfg["repeats"] < 1:
        raise UsageError("repeats must be at least 1")
    return cfg


def build_problem(cfg: dict):
    """Dataset plus matching model for the resolved config."""
    kind = cfg["model"]
    if cfg["dataset"] == "synthetic":
        data = make_synthetic(
            kind, cfg["n_samples"], cfg["n_features"], cfg["data_seed"],
            noise_std=cfg["noise_std"], flip_rate=cfg["flip_rate"],
            margin=cfg["margin"], feature_scale=cfg["feature_scale"],
            n_classes=cfg["n_classes"], test_fraction=cfg["test_fraction"])
    else:
        data = load_csv(cfg["dataset"], cfg["data_seed"],
                        test_fraction=cfg["test_fraction"])
        if kind == "logistic" and not set(np.unique(data.y)) <= {0.0, 1.0}:
            raise UsageError("logistic model needs targets in {0, 1}")
        if kind == "mlp":
            labels = np.unique(data.y)
            if not np.allclose(labels, np.round(labels)) or labels.min() < 0:
                raise UsageError("mlp model needs non-negative integer targets")
    n_classes = cfg["n_classes"]
    if kind == "mlp" and cfg["dataset"] != "synthetic":
        n_classes = int(data.y.max()) + 1
    model = build_model(kind, data.X.shape[1], hidden_units=cfg["hidden_units"],
                        n_classes=n_classes)
    return model, data


def _resolve_delta(cfg: dict, n_train: int) -> float:
    if cfg["delta"] == "auto":
        return default_delta(n_train)
    return float(cfg["delta"])


def _trainer_config(cfg: dict, budget: PrivacyBudget, seed: int) -> TrainerConfig:
    return TrainerConfig(
        steps=cfg["steps"], batch_size=cfg["batch"], budget=budget,
        gamma=cfg["gamma"], interval=cfg["k"], optimizer=cfg["optimizer"],
        clip_mode=cfg["clip_mode"], clip_threshold=cfg["clip_threshold"],
        noise_kind=cfg["noise_kind"], eta0=cfg["eta0"],
        loss_clip0=cfg["loss_clip0"], growth_cap=cfg["growth_cap"],
        loss_clip_rule=cfg["loss_clip_rule"],
        loss_clip_floor=cfg["loss_clip_floor"], auto_lr=cfg["auto_lr"],
        seed=seed, track_true_loss=cfg["track_true_loss"],
        eval_every=cfg["eval_every"])


def write_trace(path: Path, rows: list[TraceRow]) -> None:
    lines = [TRACE_HEADER]
    for r in rows:
        lines.append(f"{r.step},{r.eta!r},{r.loss_clip!r},{r.priv_loss!r},"
                     f"{r.true_loss!r},{r.test_metric!r},{r.fwd_passes}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _ledger(result: RunResult, cfg: dict) -> dict:
    expected_grad = cfg["steps"]
    expected_loss = 3 * math.ceil(cfg["steps"] / min(cfg["k"], cfg["steps"])) \
        if cfg["auto_lr"] else 0
    return {
        "gradient_releases": result.gradient_releases,
        "loss_releases": result.loss_releases,
        "expected_gradient_releases": expected_grad,
        "expected_loss_releases": expected_loss,
        "matches_plan": (result.gradient_releases == expected_grad
                         and result.loss_releases == expected_loss),
    }


def plan_only(cfg: dict) -> int:
    _, data = build_problem(cfg)
    n_train = data.n_train
    delta = _resolve_delta(cfg, n_train)
    budget = PrivacyBudget(epsilon=cfg["epsilon"], delta=delta)
    spec = SamplingSpec(batch_size=cfg["batch"], dataset_size=n_train,
                        steps=cfg["steps"],
                        interval=min(cfg["k"], cfg["steps"]))
    plan = solve_noise_plan(budget, spec, gamma=cfg["gamma"])
    report = plan_report(plan, budget, spec)
    for key in ("sigma_g", "sigma_l", "gamma", "interval", "mu_gradient",
                "mu_loss", "mu_total", "loss_budget_share", "epsilon",
                "epsilon_realized", "delta"):
        print(f"{key} = {report[key]}")
    return EXIT_OK


def run_experiment(cfg: dict) -> int:
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    model_proto, data = build_problem(cfg)
    n_train = data.n_train
    delta = _resolve_delta(cfg, n_train)
    budget = PrivacyBudget(epsilon=cfg["epsilon"], delta=delta)

    seeds = list(range(cfg["seed"], cfg["seed"] + cfg["repeats"]))
    per_seed = []
    plan_block = None
    status = EXIT_OK
    for seed in seeds:
        trace_name = "trace.csv" if cfg["repeats"] == 1 else f"trace_seed{seed}.csv"
        started = time.perf_counter()
        try:
            result = train(model_proto, data, _trainer_config(cfg, budget, seed))
        except DivergenceError as exc:
            write_trace(out_dir / trace_name, exc.trace)
            per_seed.append({"seed": seed, "diverged_at_step": exc.step,
                             "trace_file": trace_name,
                             "wall_seconds": time.perf_counter() - started})
            print(f"seed {seed}: diverged at step {exc.step}", file=sys.stderr)
            status = EXIT_DIVERGED
            break
        wall = time.perf_counter() - started
        write_trace(out_dir / trace_name, result.trace)
        if plan_block is None and result.plan is not None:
            plan_block = plan_report(result.plan, budget, result.sampling)
        per_seed.append({
            "seed": seed,
            "final_metric": result.final_metric,
            "metric_name": result.metric_name,
            "forward_passes": result.forward_passes,
            "ledger": _ledger(result, cfg),
            "trace_file": trace_name,
            "wall_seconds": wall,
        })

    finals = [s["final_metric"] for s in per_seed
              if s.get("final_metric") is not None]
    summary = {
        "config": {k: cfg[k] for k in sorted(cfg)},
        "delta_resolved": delta,
        "n_train": n_train,
        "noise_plan": plan_block,
        "seeds": seeds[:len(per_seed)],
        "runs": per_seed,
        "final_metric_median": float(np.median(finals)) if finals else None,
        "diverged": status == EXIT_DIVERGED,
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return status


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        if cfg["plan_only"]:
            return plan_only(cfg)
        return run_experiment(cfg)
    except UsageError as exc:
        print(f"dpfree: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InfeasiblePlanError, CalibrationRangeError) as exc:
        print(f"dpfree: infeasible budget: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (AccountingError, ValueError) as exc:
        print(f"dpfree: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def console_main() -> None:
    raise SystemExit(main())
