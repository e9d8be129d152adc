"""Tests for src/pipeline/verify.py"""

import pytest

from src.pipeline import verify
from src.pipeline.verify import CHECKS, FAULTS, CheckResult, run_suite


class TestChecks:
    def test_noise_reduction(self):
        result = verify.check_noise_reduction()
        assert result.passed
        assert result.observed == "(37.5, 25.0)"

    def test_non_expansion_passes_clean(self):
        assert verify.check_non_expansion().passed

    def test_asymmetric_mask_is_caught(self, monkeypatch):
        monkeypatch.setattr(verify, "CHECKS", (verify.check_non_expansion,))
        (result,) = run_suite("asymmetric-mask")
        assert not result.passed

    def test_reduction_chain(self):
        result = verify.check_reduction_chain()
        assert result.passed, result.observed

    def test_step_cost(self):
        result = verify.check_fft_count()
        assert result.passed, result.observed

    def test_dual_evaluation(self):
        assert verify.check_theorem2_dual().passed

    def test_to_dict(self):
        result = CheckResult("x", True, "1", "1", "exact")
        assert result.to_dict() == {
            "name": "x",
            "passed": True,
            "expected": "1",
            "observed": "1",
            "tolerance": "exact",
            "detail": "",
        }


class TestRunSuite:
    def test_unknown_fault(self):
        with pytest.raises(ValueError, match="Unknown fault"):
            run_suite("no-such-fault")

    def test_crashing_check_is_recorded(self, monkeypatch):
        def explode(fault=None):
            raise RuntimeError("boom")

        monkeypatch.setattr(verify, "CHECKS", (explode,))
        (result,) = run_suite()
        assert not result.passed
        assert result.name == "explode"
        assert "RuntimeError: boom" in result.observed

    @pytest.mark.slow
    def test_all_checks_pass(self):
        results = run_suite()
        assert len(results) == len(CHECKS)
        failed = [r.name for r in results if not r.passed]
        assert failed == []

    @pytest.mark.slow
    @pytest.mark.parametrize("fault", FAULTS)
    def test_fault_fails_suite(self, fault):
        assert any(not r.passed for r in run_suite(fault))
