"""Command-line runner: artifacts, exit codes, config resolution."""

import json
import math

import numpy as np
import pytest

from dpfree.accounting import PrivacyBudget, SamplingSpec, solve_noise_plan
from dpfree.cli import TRACE_HEADER, main, write_trace
from dpfree.training import TraceRow


def run_cli(args, tmp_path, name="out"):
    out = tmp_path / name
    code = main(list(args) + ["--out", str(out)])
    return code, out


BASE = ["--epsilon", "8", "--steps", "12", "--batch", "32", "--k", "5",
        "--seed", "0"]


def write_config(tmp_path, name="cfg.json", **kwargs):
    path = tmp_path / name
    path.write_text(json.dumps(kwargs))
    return str(path)


def small_args(tmp_path, extra=()):
    cfg = write_config(tmp_path, n_samples=250, n_features=4)
    return ["--config", cfg] + BASE + list(extra)


def test_plan_only_prints_solved_plan(tmp_path, capsys):
    code = main(["--epsilon", "8", "--steps", "100", "--batch", "50",
                 "--plan-only"])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    report = {}
    for line in lines:
        key, _, value = line.partition(" = ")
        report[key] = float(value)
    for key in ("sigma_g", "sigma_l", "gamma", "interval", "mu_gradient",
                "mu_loss", "mu_total", "loss_budget_share", "epsilon",
                "epsilon_realized", "delta"):
        assert key in report
    # n_train for the default synthetic set is 10000 * 0.8
    budget = PrivacyBudget(8.0, 8000.0 ** -1.1)
    spec = SamplingSpec(batch_size=50, dataset_size=8000, steps=100, interval=5)
    plan = solve_noise_plan(budget, spec, gamma=1.01)
    assert report["sigma_g"] == pytest.approx(plan.sigma_g, rel=1e-12)
    assert report["sigma_l"] == pytest.approx(plan.sigma_l, rel=1e-12)
    assert report["epsilon_realized"] == pytest.approx(8.0, rel=1e-6)


def test_run_writes_trace_and_summary(tmp_path):
    code, out = run_cli(small_args(tmp_path), tmp_path)
    assert code == 0
    trace = (out / "trace.csv").read_text().splitlines()
    assert trace[0] == TRACE_HEADER
    assert len(trace) == 1 + 12
    first = trace[1].split(",")
    assert len(first) == 7
    assert int(first[0]) == 0
    assert float(first[1]) > 0

    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_train"] == 200
    assert summary["delta_resolved"] == pytest.approx(200.0 ** -1.1)
    assert summary["seeds"] == [0]
    assert summary["diverged"] is False
    assert summary["config"]["steps"] == 12
    assert summary["config"]["epsilon"] == 8.0
    run = summary["runs"][0]
    assert run["ledger"]["matches_plan"] is True
    assert run["ledger"]["loss_releases"] == 3 * math.ceil(12 / 5)
    assert run["forward_passes"] == 12 + 2 * math.ceil(12 / 5)
    assert summary["noise_plan"]["sigma_g"] > 0
    assert summary["final_metric_median"] is not None


def test_runs_are_byte_identical(tmp_path):
    _, out1 = run_cli(small_args(tmp_path), tmp_path, name="a")
    _, out2 = run_cli(small_args(tmp_path), tmp_path, name="b")
    assert (out1 / "trace.csv").read_bytes() == (out2 / "trace.csv").read_bytes()


def test_repeats_sweep(tmp_path):
    code, out = run_cli(small_args(tmp_path, extra=["--repeats", "2"]),
                        tmp_path)
    assert code == 0
    assert (out / "trace_seed0.csv").exists()
    assert (out / "trace_seed1.csv").exists()
    assert not (out / "trace.csv").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seeds"] == [0, 1]
    finals = [r["final_metric"] for r in summary["runs"]]
    assert summary["final_metric_median"] == pytest.approx(
        float(np.median(finals)))


def test_explicit_delta_respected(tmp_path):
    code, out = run_cli(small_args(tmp_path, extra=["--delta", "1e-6"]),
                        tmp_path)
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["delta_resolved"] == 1e-6


def test_flags_override_config_file(tmp_path):
    cfg = write_config(tmp_path, n_samples=250, n_features=4, steps=5,
                       epsilon=2.0)
    code, out = run_cli(["--config", cfg, "--steps", "7", "--epsilon", "8",
                         "--batch", "32"], tmp_path)
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["steps"] == 7
    assert summary["config"]["epsilon"] == 8.0


def test_usage_errors_exit_one(tmp_path):
    # epsilon is mandatory
    assert main(["--steps", "5"]) == 1
    # unknown config key
    cfg = write_config(tmp_path, stepz=5)
    assert main(["--config", cfg, "--epsilon", "8"]) == 1
    # config file is not JSON
    bad = tmp_path / "bad.json"
    bad.write_text("steps: 5")
    assert main(["--config", str(bad), "--epsilon", "8"]) == 1
    # config file holds a list, not an object
    lst = tmp_path / "list.json"
    lst.write_text("[1, 2]")
    assert main(["--config", str(lst), "--epsilon", "8"]) == 1
    # missing config file
    assert main(["--config", str(tmp_path / "nope.json"), "--epsilon", "8"]) == 1
    # unknown flag (argparse remapped to the usage code)
    assert main(["--epsilon", "8", "--bogus"]) == 1
    # delta is neither a number nor 'auto'
    assert main(BASE[2:] + ["--epsilon", "8", "--delta", "tiny"]) == 1
    # repeats below one
    assert main(BASE + ["--repeats", "0"]) == 1
    # epsilon must be positive
    assert main(["--epsilon", "-3", "--steps", "5"]) == 1


def test_infeasible_gamma_exits_two(tmp_path, capsys):
    code, _ = run_cli(small_args(tmp_path, extra=["--gamma", "1.0"]), tmp_path)
    assert code == 2
    assert "infeasible" in capsys.readouterr().err


def test_gamma_outside_band_exits_one(tmp_path):
    code, _ = run_cli(small_args(tmp_path, extra=["--gamma", "1.5"]), tmp_path)
    assert code == 1


@pytest.mark.filterwarnings("ignore:overflow")
@pytest.mark.filterwarnings("ignore:invalid value")
def test_divergence_exits_three_with_partial_trace(tmp_path, capsys):
    cfg = write_config(tmp_path, model="linear", optimizer="sgd",
                       clip_mode="fixed", clip_threshold=1e300, eta0=1e12,
                       auto_lr=False, n_samples=100, n_features=3,
                       feature_scale=10.0)
    code, out = run_cli(["--config", cfg, "--epsilon", "8", "--steps", "30",
                         "--batch", "20"], tmp_path)
    assert code == 3
    assert "diverged" in capsys.readouterr().err
    trace = (out / "trace.csv").read_text().splitlines()
    assert trace[0] == TRACE_HEADER
    assert len(trace) < 1 + 30
    summary = json.loads((out / "summary.json").read_text())
    assert summary["diverged"] is True
    assert "diverged_at_step" in summary["runs"][0]


def test_csv_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((60, 2))
    y = (X[:, 0] > 0).astype(float)
    csv = tmp_path / "data.csv"
    np.savetxt(csv, np.column_stack([X, y]), delimiter=",", header="a,b,t",
               comments="")
    code, out = run_cli(["--epsilon", "6", "--dataset", str(csv), "--steps",
                         "8", "--batch", "16"], tmp_path)
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_train"] == 48

    y_bad = y + 1.0  # labels {1, 2} are not a binary target
    bad = tmp_path / "bad.csv"
    np.savetxt(bad, np.column_stack([X, y_bad]), delimiter=",", header="a,b,t",
               comments="")
    code, _ = run_cli(["--epsilon", "6", "--dataset", str(bad), "--steps",
                       "8", "--batch", "16"], tmp_path)
    assert code == 1


def test_write_trace_full_precision(tmp_path):
    rows = [TraceRow(step=0, eta=1.0 / 3.0, loss_clip=2.85, priv_loss=math.pi,
                     true_loss=math.nan, test_metric=0.9375, fwd_passes=3),
            TraceRow(step=1, eta=1e-300, loss_clip=1e300, priv_loss=-0.0,
                     true_loss=1.0, test_metric=math.inf, fwd_passes=4)]
    path = tmp_path / "t.csv"
    write_trace(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0] == TRACE_HEADER
    got = lines[1].split(",")
    assert float(got[1]) == 1.0 / 3.0
    assert float(got[2]) == 2.85
    assert float(got[3]) == math.pi
    assert math.isnan(float(got[4]))
    got = lines[2].split(",")
    assert float(got[1]) == 1e-300
    assert float(got[5]) == math.inf
    assert got[6] == "4"
