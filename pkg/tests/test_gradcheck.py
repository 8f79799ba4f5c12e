"""The finite-difference checker itself: accepts correct gradients, flags
broken ones, and samples coordinates deterministically."""

import numpy as np
import pytest

from dualtoken import tensor as T
from dualtoken.gradcheck import grad_check
from dualtoken.tensor import Tensor


def test_accepts_a_correct_gradient():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)),
               requires_grad=True)
    report = grad_check(lambda t: T.sum(T.gelu(t)), x)
    assert report.passed
    assert report.checked == 12
    assert report.max_rel_err <= 1e-4


def test_flags_a_broken_gradient():
    def wrong(t):
        # correct forward value, deliberately doubled backward
        out = Tensor(t.data.sum())
        if T._trace(t):
            def bwd(g, t=t):
                T._accum(t, 2.0 * g * np.ones_like(t.data))
            T._emit(out, bwd)
        return out

    x = Tensor(np.ones((2, 3)), requires_grad=True)
    report = grad_check(wrong, x)
    assert not report.passed
    assert report.max_rel_err > 0.4


def test_coordinate_sampling_is_deterministic_and_capped():
    x = Tensor(np.random.default_rng(1).standard_normal(100), requires_grad=True)
    r1 = grad_check(lambda t: T.sum(T.sigmoid(t)), x, max_coords=7, seed=3)
    r2 = grad_check(lambda t: T.sum(T.sigmoid(t)), x, max_coords=7, seed=3)
    assert r1.checked == r2.checked == 7
    assert r1.max_rel_err == r2.max_rel_err


def test_rejects_non_scalar_objective():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda t: T.add(t, t), x)


def test_report_is_truthy_iff_passed():
    x = Tensor(np.ones(3), requires_grad=True)
    report = grad_check(lambda t: T.mean(t), x)
    assert bool(report) is report.passed is True
