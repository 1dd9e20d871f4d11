import math

import numpy as np
import pytest

from divae import autodiff as ad
from divae.aligners import AlignConfig, direct_align_loss, flow_align_loss, huber, schedules, total_loss
from divae.errors import ContractViolation
from divae.flow import FlowModel
from divae.vae import VaeConfig, make_vae
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays


def test_huber_table():
    np.testing.assert_allclose(huber([0.0, 0.5, 3.0, -3.0], 1.0), [0.0, 0.125, 2.5, 2.5], atol=1e-12)


def test_direct_loss_values():
    assert direct_align_loss(ad.Tensor([1.0, 2.0]), [1.0, 2.0], [1.0, 1.0]).item() == 0.0
    assert direct_align_loss(ad.Tensor([0.5]), [0.0], [1.0]).item() == pytest.approx(math.sqrt(0.125), abs=1e-12)
    # w = sigma^-2 = (1, 4)
    v = direct_align_loss(ad.Tensor([3.0, 0.5]), [0.0, 0.0], [1.0, 0.5]).item()
    assert v == pytest.approx(math.sqrt(1.5), abs=1e-12)


def test_flow_loss_reduces_to_direct_with_zero_logdet():
    rng = np.random.default_rng(0)
    s, rho, sig = rng.normal(size=8), rng.normal(size=8), rng.uniform(0.3, 1, size=8)
    a = flow_align_loss(ad.Tensor(s), rho, sig, np.zeros(8)).item()
    b = direct_align_loss(ad.Tensor(s), rho, sig).item()
    assert a == b
    ld = rng.normal(size=8)
    assert flow_align_loss(ad.Tensor(rho + ld), rho, sig, ld).item() == pytest.approx(0.0, abs=1e-6)


def test_batch_contract():
    with pytest.raises(ContractViolation):
        direct_align_loss(ad.Tensor(np.zeros(0)), np.zeros(0), np.zeros(0))
    with pytest.raises(ContractViolation):
        direct_align_loss(ad.Tensor(np.zeros(3)), np.zeros(2), np.ones(3))
    with pytest.raises(ContractViolation):
        direct_align_loss(ad.Tensor(np.zeros(2)), np.zeros(2), np.array([1.0, 0.0]))


def test_schedules():
    assert schedules(0, 100) == (0.0, pytest.approx(0.1))
    g, k = schedules(50, 100)
    # the endpoint convention (gamma = 1 at the last epoch) puts epoch 50 of 100 at 50/99
    assert k == 1.0 and g == pytest.approx(50 / 99) and abs(g - 0.5) < 0.01
    assert schedules(99, 100)[0] == 1.0
    assert schedules(15, 30)[1] == 1.0
    assert schedules(0, 1) == (1.0, pytest.approx(0.1))
    with pytest.raises(ContractViolation):
        schedules(100, 100)


def _setup(method, seed=0):
    rng = np.random.default_rng(seed)
    model = make_vae(VaeConfig(input_dim=6, latent_dim=2, prior="gmm", prior_components=3), seed=seed)
    flow = FlowModel(2, 3, 8, seed=seed)
    for name, p in flow.parameters().items():
        if not name.endswith("bound"):
            p.data[...] = rng.normal(scale=0.3, size=p.shape)
    x = rng.normal(size=(5, 6)) * 0.3
    noise = rng.normal(size=(5, 2))
    rho = rng.normal(-3, 1, size=5)
    sigma = rng.uniform(0.2, 1, size=5)
    u = rng.normal(size=(5, 2))
    return model, flow, x, noise, rho, sigma, u


def test_epoch_zero_is_plain_negative_elbo():
    model, flow, x, noise, rho, sigma, u = _setup("direct")
    loss, diag = total_loss(x, noise, model, AlignConfig("direct"), 0.0, 1.0, rho, sigma)
    assert loss.item() == pytest.approx(-diag["elbo"], rel=1e-12)
    loss_f, diag_f = total_loss(x, noise, model, AlignConfig("flow"), 0.0, 1.0, rho, sigma, u, flow)
    assert loss_f.item() == pytest.approx(-diag_f["elbo"] + diag_f["flow_ml"], rel=1e-12)


def test_flow_alignment_gives_no_flow_gradient():
    model, flow, x, noise, rho, sigma, u = _setup("flow", seed=3)
    terms = model.forward(x, noise)
    _, logdet = flow.forward(terms["z"])
    loss = flow_align_loss(terms["s"], rho, sigma, logdet)
    grads = ad.backward(loss)
    for p in flow.parameters().values():
        assert p not in grads or np.all(grads[p] == 0.0)
    enc = [grads.get(p) for p in model.encoder.parameters().values()]
    assert any(g is not None and np.abs(g).max() > 0 for g in enc)


def test_detach_encoder_blocks_encoder_gradient_of_alignment():
    model, flow, x, noise, rho, sigma, u = _setup("direct", seed=4)
    cfg = AlignConfig("direct", detach_encoder=True)
    full, _ = total_loss(x, noise, model, cfg, 1.0, 1.0, rho, sigma)
    g_full = {k: v.copy() for k, v in ad.backward(full).items()}
    plain, _ = total_loss(x, noise, model, cfg, 0.0, 1.0, rho, sigma)
    g_plain = ad.backward(plain)
    for p in model.encoder.parameters().values():
        np.testing.assert_allclose(g_full[p], g_plain[p], atol=1e-10)


def test_missing_teacher_is_contract_violation():
    model, flow, x, noise, *_ = _setup("direct")
    with pytest.raises(ContractViolation):
        total_loss(x, noise, model, AlignConfig("direct"), 1.0, 1.0)
    with pytest.raises(ContractViolation):
        AlignConfig("sideways")


finite = st.floats(-20, 20)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite),
       arrays(np.float64, 6, elements=st.floats(0.05, 3)), st.integers(0, 5), st.floats(0, 5))
def test_alignment_nonnegative_and_monotone(s, rho, sigma, i, bump):
    base = direct_align_loss(ad.Tensor(s), rho, sigma).item()
    assert base >= 0
    moved = s.copy()
    moved[i] += np.sign(s[i] - rho[i] or 1.0) * bump
    assert direct_align_loss(ad.Tensor(moved), rho, sigma).item() >= base - 1e-12
