"""Tests for the embedded self-test harness."""

import numpy as np
import pytest

from errors import ConfigError
from stages import core, selftest


class TestChecks:

    @pytest.mark.parametrize("name", sorted(selftest.CHECKS))
    def test_check_passes_and_fails_under_fault(self, name):
        check = selftest.CHECKS[name]
        passed, detail = check(np.random.default_rng([0, 1]), False)
        assert passed, detail
        faulty, _ = check(np.random.default_rng([0, 1]), True)
        assert not faulty

    def test_outlier_instance_fraction(self, rng):
        source, target, c, gt = selftest.outlier_instance(rng, n=100, inlier_fraction=0.6)
        residuals = core.correspondence_residuals(gt, c, source, target)
        assert np.count_nonzero(residuals < 1e-9) >= 60


class TestHarness:

    def test_unknown_fault(self):
        with pytest.raises(ConfigError, match="unknown self-test check"):
            selftest.run_selftest(inject_fault="no_such_check")

    @pytest.mark.slow
    def test_all_pass(self):
        results = selftest.run_selftest()
        assert [r.name for r in results] == list(selftest.CHECKS)
        assert all(r.passed for r in results), selftest.format_results(results)

    @pytest.mark.slow
    def test_injected_fault_fails_only_its_check(self):
        results = selftest.run_selftest(inject_fault="strict_threshold")
        failed = [r.name for r in results if not r.passed]
        assert failed == ["strict_threshold"]
        assert selftest.format_results(results).splitlines()[-1] == f"{len(results) - 1}/{len(results)} checks passed"

    def test_format_results(self):
        results = [
            selftest.CheckResult(name="a", passed=True, detail="ok", elapsed_ms=1.0),
            selftest.CheckResult(name="b", passed=False, detail="off by one", elapsed_ms=2.0),
        ]
        assert selftest.format_results(results) == "PASS a (ok)\nFAIL b (off by one)\n1/2 checks passed\n"
