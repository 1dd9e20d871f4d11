import math

import numpy as np
import pytest

from divae.errors import ContractViolation
from divae.synthgen import (
    Gmm2dSpec,
    ancestor_logpdf,
    build_dataset,
    default_spec,
    filler_logpdf,
    oracle_logpdf,
    random_rotation,
    sample_gmm2d,
    unrotate,
)

LN2PI = math.log(2 * math.pi)


def single(mean=(0.0, 0.0), cov=None):
    return Gmm2dSpec(np.array([1.0]), np.array([mean], dtype=float), np.array([np.eye(2) if cov is None else cov]))


def test_sample_moments():
    u, labels = sample_gmm2d(single(), 100_000, 0)
    assert np.abs(u.mean(0)).max() < 0.02
    assert np.abs(np.cov(u.T) - np.eye(2)).max() < 0.05
    assert (labels == 0).all()


def test_zero_weight_component_never_drawn():
    spec = Gmm2dSpec(np.array([1.0, 0.0]), np.array([[0.0, 0.0], [5.0, 5.0]]), np.array([np.eye(2)] * 2))
    _, labels = sample_gmm2d(spec, 2000, 1)
    assert (labels == 0).all()


def test_sampling_is_deterministic():
    a = sample_gmm2d(default_spec(4), 500, 3)
    b = sample_gmm2d(default_spec(4), 500, 3)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_invalid_specs_rejected():
    with pytest.raises(ContractViolation):
        Gmm2dSpec(np.array([0.5, 0.4]), np.zeros((2, 2)), np.array([np.eye(2)] * 2))
    with pytest.raises(ContractViolation):
        Gmm2dSpec(np.array([1.0]), np.zeros((1, 2)), np.array([[[1.0, 2.0], [2.0, 1.0]]]))


def test_rotation_properties():
    R2 = random_rotation(2, 0)
    v = np.random.default_rng(1).normal(size=(20, 2))
    np.testing.assert_allclose(np.linalg.norm(v @ R2.T, axis=1), np.linalg.norm(v, axis=1), atol=1e-12)
    for dim in (2, 3, 7, 50):
        R = random_rotation(dim, dim)
        assert abs(np.linalg.det(R) - 1) < 1e-8
    R = random_rotation(50, 5)
    assert np.abs(R.T @ R - np.eye(50)).max() < 1e-10


def test_identity_rotation_tiny_padding_recovers_draws():
    spec = default_spec(4)
    tr, _ = build_dataset(spec, 5, 1e-12, 200, 10, seed=0, rotation=np.eye(5))
    assert np.abs(tr.X[:, 2:]).max() < 1e-9
    np.testing.assert_allclose(tr.X @ tr.ancestor_projector.T, tr.X[:, :2], atol=0)


def test_projector_recovers_ancestors_under_random_rotation():
    tr, _ = build_dataset(default_spec(4), 20, 0.02, 300, 10, seed=4)
    u_direct, _ = unrotate(tr.X, tr)
    u_proj = tr.X @ tr.ancestor_projector.T
    np.testing.assert_allclose(u_proj, u_direct, atol=1e-10)
    # rebuild the ancestors from the generator stream and compare
    rot_seq, train_seq, _ = np.random.SeedSequence(4).spawn(3)
    u, _ = default_spec(4).sample(300, np.random.default_rng(train_seq))
    np.testing.assert_allclose(u_proj, u, atol=1e-10)


def test_oracle_logpdf_unit_value():
    ds, _ = build_dataset(single(), 3, 0.02, 5, 1, seed=0, rotation=np.eye(3))
    v = oracle_logpdf(np.zeros((1, 3)), ds)[0]
    assert v == pytest.approx(-LN2PI + 2.9931, abs=1e-4)
    assert v == pytest.approx(1.1552, abs=1e-4)


def test_oracle_rotation_invariance_and_decomposition():
    tr, _ = build_dataset(default_spec(3), 6, 0.02, 100, 1, seed=9)
    u, w = unrotate(tr.X, tr)
    direct = tr.spec.logpdf(u) + filler_logpdf(w, 0.02)
    np.testing.assert_allclose(oracle_logpdf(tr.X, tr), direct, atol=1e-10)
    np.testing.assert_allclose(ancestor_logpdf(tr.X, tr), oracle_logpdf(tr.X, tr) - filler_logpdf(w, 0.02),
                               atol=1e-10)


def test_oracle_integrates_to_one():
    spec = single(cov=0.5 * np.eye(2))
    ds, _ = build_dataset(spec, 3, 0.3, 5, 1, seed=0)
    # midpoint rule on a 3D grid
    half, m = 4.0, 121
    h = 2 * half / m
    g = -half + h * (np.arange(m) + 0.5)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    mass = np.exp(oracle_logpdf(pts, ds)).sum() * h**3
    assert abs(mass - 1) < 0.02


def test_ancestor_identity_rotation_and_symmetric_midpoint():
    spec = Gmm2dSpec(np.array([0.5, 0.5]), np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([np.eye(2)] * 2))
    ds, _ = build_dataset(spec, 4, 0.02, 50, 1, seed=0, rotation=np.eye(4))
    np.testing.assert_allclose(ancestor_logpdf(ds.X, ds), spec.logpdf(ds.X[:, :2]), atol=1e-12)
    assert ancestor_logpdf(np.zeros((1, 4)), ds)[0] == pytest.approx(-LN2PI - 0.5, abs=1e-12)


def test_ancestor_mean_matches_negative_entropy():
    spec = default_spec(4)
    tr, _ = build_dataset(spec, 10, 0.02, 100_000, 1, seed=11)
    vals = ancestor_logpdf(tr.X, tr)
    u, _ = sample_gmm2d(spec, 1_000_000, 99)
    neg_entropy = spec.logpdf(u).mean()
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - neg_entropy) < 3 * se + 3 * spec.logpdf(u).std() / 1000


def test_dimension_mismatch_rejected():
    tr, _ = build_dataset(default_spec(2), 5, 0.02, 10, 1, seed=0)
    with pytest.raises(ContractViolation):
        oracle_logpdf(np.zeros((2, 4)), tr)
