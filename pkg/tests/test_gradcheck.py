"""The finite-difference checker itself: reporting, caps, edge cases."""

import numpy as np
import pytest

from sketchlab.errors import ValidationError
from sketchlab.gradcheck import MAX_CHECK_PARAMS, gradient_check
from sketchlab.layers import Linear
from sketchlab.params import Parameter


def quadratic_fragment():
    p = Parameter(np.array([1.0, -2.0], dtype=np.float32), "p")

    def loss():
        p.accumulate(2.0 * p.value.astype(np.float64))
        return float((p.value.astype(np.float64) ** 2).sum())

    return p, loss


def test_correct_gradient_passes():
    p, loss = quadratic_fragment()
    report = gradient_check([p], loss)
    assert report.passed
    assert report.entries[0].status == "ok"
    # Probe steps are rounded to float32 before application, so even an
    # exact quadratic carries ~1e-5 of step-size error.
    assert report.max_rel_error < 1e-4


def test_wrong_gradient_fails():
    p = Parameter(np.array([1.0, -2.0], dtype=np.float32), "p")

    def loss():
        p.accumulate(3.0 * p.value.astype(np.float64))  # should be 2x
        return float((p.value.astype(np.float64) ** 2).sum())

    report = gradient_check([p], loss)
    assert not report.passed
    assert report.entries[0].status == "fail"
    assert "FAIL" in str(report)


def test_frozen_parameter_reported_skipped():
    p, loss = quadratic_fragment()
    q = Parameter(np.zeros(3, dtype=np.float32), "q", frozen=True)
    report = gradient_check([p, q], loss)
    assert report.passed
    by_name = {e.name: e for e in report.entries}
    assert by_name["q"].status == "skipped (frozen)"
    assert by_name["q"].max_rel_error is None
    assert "skipped (frozen)" in str(report)


def test_loss_independent_parameter_has_zero_gradient():
    p, loss = quadratic_fragment()
    bystander = Parameter(np.array([5.0], dtype=np.float32), "bystander")
    report = gradient_check([p, bystander], loss)
    # analytic 0 vs numeric 0: agreement, not a spurious failure
    assert report.passed


def test_parameter_cap_enforced():
    big = Parameter(np.zeros(MAX_CHECK_PARAMS + 1, dtype=np.float32), "big")
    with pytest.raises(ValidationError):
        gradient_check([big], lambda: 0.0)


def test_non_finite_loss_is_diagnosed():
    p = Parameter(np.ones(1, dtype=np.float32), "p")
    with pytest.raises(ValidationError, match="not finite"):
        gradient_check([p], lambda: float("nan"))


def test_values_restored_after_probing(rng):
    lin = Linear(3, 2, rng=rng)
    x = rng.normal(size=(2, 3))
    w = rng.normal(size=(2, 2))
    before = lin.weight.value.copy()

    def loss():
        y = lin.forward(x)
        lin.backward(w)
        return float((y * w).sum())

    gradient_check(lin.parameters(), loss)
    assert np.array_equal(lin.weight.value, before)
