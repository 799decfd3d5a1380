import numpy as np
import pytest

from dmosapo.core.autodiff import Value
from dmosapo.core.optim import Adam, clip_grad_norm, global_norm


def test_adam_first_step_moves_by_learning_rate():
    p = Value(np.array([1.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.array([2.0])
    assert opt.step()
    np.testing.assert_allclose(p.data, [0.9], atol=1e-6)
    assert opt.step_count == 1


def test_adam_skips_non_finite_gradients():
    p = Value(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.array([np.nan, 1.0])
    assert not opt.step()
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert opt.skipped_steps == 1
    assert opt.step_count == 0


def test_adam_state_round_trip():
    p = Value(np.array([1.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.array([0.5])
    opt.step()
    other = Adam([Value(np.array([1.0]), requires_grad=True)], lr=0.1)
    other.load_state_dict(opt.state_dict())
    assert other.step_count == 1
    np.testing.assert_array_equal(other._m[0], opt._m[0])


def test_clip_grad_norm_scales_to_max():
    a = Value(np.zeros(1), requires_grad=True)
    b = Value(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    before = clip_grad_norm([a, b], 1.0)
    assert before == 5.0
    np.testing.assert_allclose(global_norm([a, b]), 1.0)


def test_clip_grad_norm_leaves_small_gradients():
    a = Value(np.zeros(2), requires_grad=True)
    a.grad = np.array([0.3, 0.4])
    assert clip_grad_norm([a], 10.0) == pytest.approx(0.5)
    np.testing.assert_array_equal(a.grad, [0.3, 0.4])
