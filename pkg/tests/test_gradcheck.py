import numpy as np
import pytest

from condattn import autodiff as ad
from condattn.gradcheck import (
    CheckResult,
    check_gradients,
    format_report,
    main_check,
    rel_error,
    run_suite,
)

EXPECTED_NAMES = {"add", "matmul", "conv2d", "maxpool2d", "softmax", "batchnorm_train", "lstm_cell",
                  "attention_step", "double_stochastic", "recognition_model", "caption_model"}


@pytest.fixture(scope="module")
def suite():
    ok, report, elapsed = main_check(0)
    return ok, report, elapsed


class TestRelError:
    def test_floor_for_tiny_values(self):
        assert rel_error(1e-9, 0.0) == pytest.approx(1e-9 / 1e-6)

    def test_symmetric(self):
        assert rel_error(2.0, 1.0) == rel_error(1.0, 2.0) == 0.5


class TestSuite:
    def test_passes_within_budget(self, suite):
        ok, report, elapsed = suite
        assert ok, report
        assert elapsed <= 60.0

    def test_report_lists_components(self, suite):
        rows = suite[1].strip().splitlines()
        assert rows[0] == "component,max_rel_error,checked,skipped,status"
        names = {r.split(",")[0] for r in rows[1:]}
        assert EXPECTED_NAMES <= names
        assert all(r.endswith(",pass") for r in rows[1:])

    def test_quadratic_exact(self, rng):
        res = check_gradients("sq", lambda p: ad.mul(p["x"], p["x"]), {"x": rng.standard_normal(5)}, rng)
        assert res.passed and res.checked == 5 and res.skipped == 0

    def test_corrupted_op_detected(self, monkeypatch):
        monkeypatch.setattr(ad, "CORRUPT_OPS", {"matmul"})
        results = run_suite(0, per_tensor=2)
        failed = {r.name for r in results if not r.passed}
        assert "matmul" in failed and "recognition_model" in failed
        assert "relu" not in failed
        assert "FAIL" in format_report(results)


def test_result_pass_threshold():
    assert CheckResult("x", 1e-4, 1, 0).passed
    assert not CheckResult("x", 1.01e-4, 1, 0).passed
