"""The gradient-check suite itself: coverage, determinism, and the pass gate."""

import time

from amalgam.gradcheck import TOL, run_suite

EXPECTED_CHECKS = {
    "conv2d",
    "linear",
    "elementwise",
    "reduce",
    "softmax",
    "cross_entropy",
    "gather_reshape",
    "fa_forward",
    "transfer_loss",
    "weight_regularization",
    "soft_target_loss",
    "total_loss",
    "blocknet_forward",
}


class TestRunSuite:
    def test_covers_every_op_and_passes(self):
        results = run_suite(seed=0, cases_per_op=2)
        assert {r.name for r in results} == EXPECTED_CHECKS
        for r in results:
            assert r.passed, f"{r.name}: rel error {r.max_rel_error}"
            assert r.max_rel_error < TOL

    def test_is_deterministic(self):
        a = run_suite(seed=4, cases_per_op=1)
        b = run_suite(seed=4, cases_per_op=1)
        assert [(r.name, r.max_rel_error) for r in a] == [
            (r.name, r.max_rel_error) for r in b
        ]

    def test_tolerance_gates_the_verdict(self):
        """Same errors, absurdly tight tolerance: the pass flags must flip."""
        results = run_suite(seed=0, cases_per_op=1, tol=1e-18)
        assert any(not r.passed for r in results)
        for r in results:
            assert r.passed == (r.max_rel_error < 1e-18)

    def test_default_budget_is_under_a_minute(self):
        start = time.monotonic()
        run_suite(seed=0, cases_per_op=5)
        assert time.monotonic() - start < 60.0
