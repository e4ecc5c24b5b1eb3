"""Acceptance criteria; each test prints one PASS/FAIL line.

The desk-scale training runs are marked ``slow``; deselect them with
``-m "not slow"`` for a quick pass.
"""

import csv
import json
import math
import subprocess
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest

from metric_cgenn.cli import EXIT_OK, EXIT_VERIFY, main
from metric_cgenn.properties import run_cases, run_suite


@contextmanager
def criterion(record_property, name, limit_s=None):
    """Time the body, enforce the runtime bound, and record one result line."""
    info = {"details": [], "report": []}
    start = time.perf_counter()
    try:
        yield info
        elapsed = time.perf_counter() - start
        if limit_s is not None:
            assert elapsed < limit_s, f"runtime {elapsed:.1f}s exceeds {limit_s}s"
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        line = f"FAIL {name} [{elapsed:.1f}s] {reason}"
        record_property("acceptance", line)
        print(line)
        raise
    line = f"PASS {name} [{elapsed:.1f}s] " + "; ".join(info["details"])
    for extra in info["report"]:
        line += "\n     " + extra
    record_property("acceptance", line)
    print(line)


def _gate(report, tolerances, info):
    for c in report.cases:
        tol = tolerances.get(c.name, c.tolerance)
        assert c.passed, f"{c.name} failed: {c.failures[:1]}"
        assert c.max_error <= tol, f"{c.name} max error {c.max_error:.2e} > {tol:.0e}"
        info["details"].append(f"{c.name} {c.max_error:.1e}")


def test_algebra_exactness(record_property):
    with criterion(record_property, "Algebra exactness (500 trials)", limit_s=30) as info:
        report = run_suite("algebra", seed=0, trials=500)
        exact = ("associativity", "bilinearity", "grade1_identity", "reversal", "quadratic_form")
        _gate(report, {f"algebra.{n}": 1e-10 for n in exact}, info)


def test_metric_pipeline(record_property):
    names = ["metric.reconstruction", "metric.consistency", "metric.anticommutation_forward",
             "metric.anticommutation_reverse", "metric.volume_identity"]
    with criterion(record_property, "Metric pipeline (100 matrices)", limit_s=30) as info:
        report = run_cases(names, seed=0, trials=100)
        tol = {"metric.reconstruction": 1e-10, "metric.consistency": 1e-10}
        tol.update({n: 1e-9 for n in names[2:]})
        _gate(report, tol, info)


def test_differentiation(record_property):
    names = ["autodiff.op_gradcheck", "autodiff.loss_gradcheck", "layers.layer_gradcheck", "metric.eig_backward"]
    with criterion(record_property, "Differentiation (50 trials)", limit_s=120) as info:
        report = run_cases(names, seed=0, trials=50)
        _gate(report, {n: 1e-4 for n in names}, info)


def test_equivariance(record_property):
    names = ["model.equivariance_pre", "model.equivariance_post"]
    with criterion(record_property, "Equivariance (50 rotors)") as info:
        report = run_cases(names, seed=0, trials=50)
        _gate(report, {n: 1e-5 for n in names}, info)


def _train(tmp_path, name, data, *flags):
    out = tmp_path / name
    args = ["train", "--train-data", str(data[0]), "--eval-data", str(data[1]), "--out", str(out),
            "--seed", "0", "--quiet", *flags]
    assert main(args) == EXIT_OK
    return json.loads((out / "summary.json").read_text()), out


@pytest.mark.slow
def test_signed_volume_desk_run(record_property, tmp_path):
    data = (tmp_path / "train.jsonl", tmp_path / "eval.jsonl")
    with criterion(record_property, "Signed-volume desk run (1000 samples, 5000 steps)", limit_s=15 * 60) as info:
        for path, seed in zip(data, (0, 1)):
            assert main(["gen-data", "--task", "signed-volume", "--n", "1000", "--seed", str(seed),
                         "--out", str(path)]) == EXIT_OK
        common = ("--task", "signed-volume", "--steps", "5000", "--epsilon", "1e-3", "--q-signature", "1,1,1")
        learn, _ = _train(tmp_path, "learnable", data, *common, "--metric-activation", "0.0")
        fixed, _ = _train(tmp_path, "fixed", data, *common, "--metric-activation", "1.0")
        info["details"].append(f"train MSE {learn['initial_train_loss']:.3e} -> {learn['final_train_loss']:.3e}")
        info["report"] += [
            "run          final train MSE   final eval MSE",
            f"learnable M  {learn['final_train_loss']:.3e}         {learn['final_eval_loss']:.3e}",
            f"fixed Q      {fixed['final_train_loss']:.3e}         {fixed['final_eval_loss']:.3e}",
            "learnable <= fixed on eval: " + str(learn["final_eval_loss"] <= fixed["final_eval_loss"]),
        ]
        assert learn["final_train_loss"] <= 1e-2
        assert learn["final_train_loss"] <= 0.01 * learn["initial_train_loss"]


def _check_csv(path, activation_step, steps):
    rows = list(csv.DictReader(path.open()))
    assert rows and int(rows[-1]["step"]) == steps - 1
    for r in rows:
        for key in ("train_loss", "eval_loss", "metric_offdiag_norm"):
            assert math.isfinite(float(r[key])), (r["step"], key)
        active = activation_step is not None and int(r["step"]) >= activation_step
        assert r["metric_activated"] == ("1" if active else "0"), r["step"]
    if activation_step is not None:
        assert any(int(r["step"]) == activation_step for r in rows)


@pytest.mark.slow
def test_activation_timing_sweep(record_property, tmp_path):
    steps = 10_000
    data = (tmp_path / "train.jsonl", tmp_path / "eval.jsonl")
    with criterion(record_property, "Activation-timing sweep (n-body, 10000 steps)", limit_s=3600) as info:
        for path, n, seed in zip(data, (3000, 500), (0, 1)):
            assert main(["gen-data", "--task", "nbody", "--n", str(n), "--seed", str(seed),
                         "--out", str(path)]) == EXIT_OK
        results = {}
        for frac in (0.3, 0.6, 0.9, 1.0):
            s, out = _train(tmp_path, f"f{frac}", data, "--task", "nbody", "--steps", str(steps),
                            "--metric-activation", str(frac))
            expected = math.floor(frac * steps) if frac < 1.0 else None
            assert s["activation_step"] == expected
            assert s["metric_symmetric_every_step"], f"M lost symmetry at fraction {frac}"
            for key in ("initial_train_loss", "final_train_loss", "final_eval_loss"):
                assert math.isfinite(s[key]), (frac, key)
            m = np.array(s["metric_M"])
            assert np.array_equal(m, m.T)
            _check_csv(out / "metrics.csv", expected, steps)
            results[frac] = s
        info["report"].append("activation  fraction  final train MSE  final eval MSE")
        for frac, label in ((0.3, "early"), (0.6, "mid"), (0.9, "late"), (1.0, "never")):
            s = results[frac]
            info["report"].append(
                f"{label:<11} {frac:<9} {s['final_train_loss']:.4e}       {s['final_eval_loss']:.4e}")
        ev = {f: results[f]["final_eval_loss"] for f in (0.3, 0.6, 0.9)}
        info["report"].append(f"late <= mid <= early: {ev[0.9] <= ev[0.6] <= ev[0.3]}")
        info["details"].append("4 runs finite, M symmetric every step, CSV activation rows correct")


def _cli(*args, cwd):
    proc = subprocess.run([sys.executable, "-m", "metric_cgenn", *args], cwd=cwd, capture_output=True)
    return proc.returncode, proc.stdout, proc.stderr


def _snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_determinism(record_property, tmp_path):
    commands = [
        ("gen-data", "--task", "signed-volume", "--n", "50", "--seed", "3", "--out", "sv.jsonl"),
        ("gen-data", "--task", "nbody", "--n", "5", "--seed", "3", "--out", "nb.jsonl"),
        ("train", "--task", "signed-volume", "--train-data", "sv.jsonl", "--eval-data", "sv.jsonl",
         "--out", "run", "--steps", "40", "--batch-size", "8", "--hidden-channels", "3",
         "--metric-activation", "0.5", "--log-every", "5", "--json", "train.json"),
        ("train", "--task", "nbody", "--train-data", "nb.jsonl", "--out", "nbrun", "--steps", "10",
         "--batch-size", "4", "--hidden-channels", "3", "--metric-activation", "0.3", "--quiet"),
        ("eval", "--checkpoint", "run/checkpoint.json", "--data", "sv.jsonl", "--json", "eval.json"),
        ("verify", "--suite", "metric", "--trials", "3", "--json", "verify.json"),
        ("cayley", "--signature", "1,-1,-1", "--json", "cayley.json"),
    ]
    with criterion(record_property, "Determinism (every command twice)") as info:
        outputs = []
        for rep in ("a", "b"):
            work = tmp_path / rep
            work.mkdir()
            streams = []
            for cmd in commands:
                code, out, err = _cli(*cmd, cwd=work)
                assert code == EXIT_OK, (cmd[0], err.decode())
                streams.append((out, err))
            outputs.append((streams, _snapshot(work)))
        (s1, f1), (s2, f2) = outputs
        for cmd, a, b in zip(commands, s1, s2):
            assert a == b, f"{cmd[0]} output differs between runs"
        assert f1.keys() == f2.keys()
        for name in f1:
            assert f1[name] == f2[name], f"{name} differs between runs"
        info["details"].append(f"{len(commands)} commands, {len(f1)} files bit-identical")


@pytest.mark.parametrize("mutation", ["sign_flip", "unsymmetrized"])
def test_mutation_smoke(record_property, request, capsys, mutation):
    with criterion(record_property, f"Mutation smoke test ({mutation})") as info:
        request.getfixturevalue(mutation)
        code = main(["verify", "--suite", "all", "--trials", "5"])
        failed = [ln.split()[1] for ln in capsys.readouterr().out.splitlines() if ln.startswith("FAIL")]
        assert code == EXIT_VERIFY, "verify --suite all did not fail"
        info["details"].append("failing cases: " + ", ".join(failed))
