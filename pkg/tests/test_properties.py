import json

import numpy as np
import pytest

from metric_cgenn import properties
from metric_cgenn.algebra import DiagonalMetric, build_cayley_table, geometric_product, Multivector
from metric_cgenn.cli import EXIT_OK, EXIT_VERIFY, main
from metric_cgenn.properties import INVARIANTS, SUITES, check_coverage, registered_cases, run_cases, run_suite


def test_every_invariant_has_a_case():
    check_coverage()
    covered = {(c.group, inv) for c in registered_cases() for inv in c.covers}
    for group, invs in INVARIANTS.items():
        for inv in invs:
            assert (group, inv) in covered


def test_coverage_check_fails_on_uncovered_invariant(monkeypatch):
    monkeypatch.setitem(INVARIANTS, "algebra", INVARIANTS["algebra"] + ("made_up",))
    with pytest.raises(RuntimeError, match="algebra.made_up"):
        check_coverage()


def test_bad_arguments():
    with pytest.raises(ValueError):
        run_suite("nope")
    with pytest.raises(ValueError):
        run_suite("algebra", trials=0)


def test_report_structure():
    report = run_suite("algebra", seed=3, trials=5)
    d = report.to_dict()
    assert d["suite"] == "algebra" and d["seed"] == 3 and d["trials"] == 5
    assert d["passed"] is True and d["failures"] == []
    assert d["cases_run"] == len(report.cases) > 0
    assert set(d["max_errors"]) == {c.name for c in report.cases}
    assert all(c.name.startswith("algebra.") for c in report.cases)
    json.dumps(d)


def test_reports_are_deterministic():
    a = run_suite("metric", seed=11, trials=4).to_dict()
    b = run_suite("metric", seed=11, trials=4).to_dict()
    assert a == b


def test_all_runs_every_suite_in_order():
    report = run_suite("all", trials=2)
    groups = [c.group for c in report.cases]
    order = [g for s in SUITES if s != "all" for g in properties.SUITE_GROUPS[s]]
    assert sorted(set(groups), key=order.index) == order
    assert groups == sorted(groups, key=order.index)
    assert report.passed, report.failures


def test_case_results_do_not_depend_on_the_suite():
    alone = {c.name: c.max_error for c in run_suite("algebra", trials=3).cases}
    within = {c.name: c.max_error for c in run_suite("all", trials=3).cases if c.group == "algebra"}
    assert alone == within


def test_sign_flip_corrupts_the_product(sign_flip):
    table = build_cayley_table(DiagonalMetric.euclidean(2))
    e1 = Multivector(2, [0, 1.0, 0, 0])
    e2 = Multivector(2, [0, 0, 1.0, 0])
    np.testing.assert_array_equal(geometric_product(e1, e2, table).coeffs, [0, 0, 0, -1.0])


def test_sign_flip_fails_verification(sign_flip, capsys):
    assert main(["verify", "--suite", "all", "--trials", "3"]) == EXIT_VERIFY
    out = capsys.readouterr().out
    assert "FAIL algebra.associativity" in out
    assert "FAIL algebra.bruteforce_n2" in out


def test_missing_symmetrization_fails_verification(unsymmetrized, capsys):
    assert main(["verify", "--suite", "all", "--trials", "3"]) == EXIT_VERIFY
    out = capsys.readouterr().out
    assert "FAIL metric.eig_backward" in out
    assert "FAIL model.metric_symmetry" in out


def test_clean_verification_passes(capsys):
    assert main(["verify", "--suite", "all", "--trials", "3"]) == EXIT_OK
    assert "0 failed" in capsys.readouterr().out


def test_run_cases_matches_suite_results():
    names = ["algebra.reversal", "metric.round_trip"]
    picked = run_cases(names, seed=2, trials=3)
    assert [c.name for c in picked.cases] == names
    suite = {c.name: c.max_error for c in run_suite("metric", seed=2, trials=3).cases}
    assert picked.cases[1].max_error == suite["metric.round_trip"]
    with pytest.raises(ValueError):
        run_cases(["algebra.nope"])
