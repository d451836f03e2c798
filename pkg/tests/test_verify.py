# tests/test_verify.py

import json
import math

import numpy as np
import pytest

from lrclone.enums import Suite
from lrclone.verify import (
    TINY_HAND_COUNT,
    CheckResult,
    VerifyReport,
    check_gradients,
    check_identity_equivalence,
    check_lemma1,
    check_materialize,
    check_param_counts,
    load_report_jsonl,
    run_suite,
)


@pytest.mark.unit
class TestReport:
    def test_warning_does_not_fail(self):
        report = VerifyReport([CheckResult("a", True, 0.0, 1.0), CheckResult("b", False, 3.0, 2.5, warning=True)])
        assert report.passed
        assert [c.name for c in report.warnings] == ["b"]
        assert report.human_summary() == "[OK] 2 checks, 0 failed, 1 warnings"

    def test_failure(self):
        report = VerifyReport([CheckResult("a", False, 2.0, 1.0)])
        assert not report.passed
        assert report.human_summary().startswith("[FAIL]")
        assert "FAIL" in report.lines()[0]

    def test_jsonl_fields(self, temp_dir):
        report = VerifyReport([CheckResult("a", True, 0.5, 1.0, ms=1.23456), CheckResult("b", False, math.nan, 0.0)])
        path = temp_dir / "out" / "verify.jsonl"
        report.write_jsonl(path)
        rows = load_report_jsonl(path)
        assert rows[0] == {"name": "a", "status": "pass", "value": 0.5, "tol": 1.0, "ms": 1.235}
        assert rows[1]["status"] == "fail" and rows[1]["value"] == "nan"
        assert all(json.loads(line) for line in path.read_text().splitlines())

    def test_find(self):
        report = VerifyReport([CheckResult("x", True, 0.0, 0.0)])
        assert report.find("x").passed
        with pytest.raises(KeyError):
            report.find("y")


@pytest.mark.unit
class TestChecks:
    def test_lemma1_float64(self):
        report = check_lemma1(seed=0, trials=20)
        assert report.passed, report.lines()
        assert [c.name for c in report.checks] == ["lemma1.ffn", "lemma1.attn"]
        assert report.find("lemma1.ffn").tolerance == 1e-10

    def test_lemma1_float32_tolerance(self):
        report = check_lemma1(seed=1, trials=10, dtype=np.float32)
        assert report.passed, report.lines()
        assert report.find("lemma1.attn").tolerance == 1e-4

    def test_lemma1_needs_trials(self):
        with pytest.raises(ValueError):
            check_lemma1(trials=0)

    def test_identity(self):
        report = check_identity_equivalence(seed=2)
        assert report.passed, report.lines()
        assert report.find("identity.clone").value == 0.0
        assert report.find("identity.perturbed").value > 0.0

    def test_param_counts(self):
        report = check_param_counts()
        assert report.passed, report.lines()
        assert report.find("params.tiny_hand_count").value == TINY_HAND_COUNT == 30_880

    def test_materialize(self):
        report = check_materialize(seed=3)
        assert report.passed, report.lines()


@pytest.mark.integration
class TestSuites:
    def test_gradients(self):
        report = check_gradients(max_entries=3)
        assert report.passed, report.lines()
        assert report.find("gradients.alpha_zero").value <= 1e-12

    def test_single_suite_selection(self, reporter):
        report = run_suite(Suite.params, reporter=reporter, verbose=1)
        assert {c.name.split(".")[0] for c in report.checks} == {"params"}
        assert reporter.infos == ["[verify] running params"]


@pytest.mark.slow
def test_desk_scale_distillation():
    report = run_suite(Suite.distill)
    assert report.passed, report.lines()
