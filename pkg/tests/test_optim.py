import numpy as np
import pytest

from divae import autodiff as ad
from divae.errors import ContractViolation
from divae.optim import Adam, AdamState, adam_step


def test_zero_gradient_leaves_parameters():
    p = {"w": np.array([1.0, -2.0])}
    st = AdamState(lr=0.1)
    adam_step(st, p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_first_step_moves_by_lr_times_sign():
    p = {"w": np.array([0.0, 0.0, 0.0])}
    g = np.array([3.0, -0.2, 50.0])
    st = AdamState(lr=1e-3)
    adam_step(st, p, {"w": g})
    np.testing.assert_allclose(p["w"], -1e-3 * np.sign(g), atol=1e-6)


def test_minimizes_quadratic():
    w = ad.parameter([5.0, -5.0])
    opt = Adam({"w": w}, lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        ad.backward(0.5 * ad.sum_(ad.square(w)))
        opt.step()
    assert np.linalg.norm(w.data) < 1e-3


def test_missing_gradient_counts_as_zero():
    p = {"a": np.ones(2), "b": np.ones(2)}
    st = AdamState(lr=0.1)
    adam_step(st, p, {"a": np.ones(2)})
    np.testing.assert_array_equal(p["b"], np.ones(2))
    assert not np.allclose(p["a"], 1.0)


def test_shape_mismatch_rejected():
    with pytest.raises(ContractViolation):
        adam_step(AdamState(), {"a": np.ones(2)}, {"a": np.ones(3)})
