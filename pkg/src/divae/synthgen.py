"""Synthetic data: a 2D Gaussian mixture lifted into R^D.

A point is generated as ``x = R [u; w]`` where ``u`` is drawn from the 2D
mixture, ``w`` are ``D - 2`` independent ``N(0, sigma_pad^2)`` filler
coordinates and ``R`` is a random rotation. Because ``R`` is orthogonal the
exact log-density of ``x`` is available in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ContractViolation

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class Gmm2dSpec:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, 2)
    covs: np.ndarray  # (k, 2, 2)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        self.covs = np.asarray(self.covs, dtype=np.float64).reshape(-1, 2, 2)
        self.validate()

    @property
    def k(self) -> int:
        return len(self.weights)

    def validate(self) -> None:
        k = len(self.weights)
        if k < 1 or self.means.shape != (k, 2) or self.covs.shape != (k, 2, 2):
            raise ContractViolation("Gmm2dSpec: inconsistent component shapes")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ContractViolation("Gmm2dSpec: weights must be non-negative and sum to 1")
        if not np.allclose(self.covs, np.swapaxes(self.covs, 1, 2)):
            raise ContractViolation("Gmm2dSpec: covariances must be symmetric")
        if np.any(np.linalg.eigvalsh(self.covs) <= 0):
            raise ContractViolation("Gmm2dSpec: covariances must be positive definite")

    def component_logpdf(self, u: np.ndarray) -> np.ndarray:
        """(N, k) matrix of log N(u_n; mean_j, cov_j)."""
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        chol = np.linalg.cholesky(self.covs)
        out = np.empty((u.shape[0], self.k))
        for j in range(self.k):
            diff = u - self.means[j]
            sol = np.linalg.solve(chol[j], diff.T)
            maha = np.sum(sol * sol, axis=0)
            logdet = 2.0 * np.sum(np.log(np.diag(chol[j])))
            out[:, j] = -0.5 * maha - 0.5 * logdet - LOG_2PI
        return out

    def logpdf(self, u: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logsumexp(self.component_logpdf(u) + logw, axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if n < 1:
            raise ContractViolation("sample size must be positive")
        labels = rng.choice(self.k, size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covs)
        eps = rng.standard_normal((n, 2))
        u = self.means[labels] + np.einsum("nij,nj->ni", chol[labels], eps)
        return u, labels


def default_spec(k: int, radius: float = 5.0, variance: float = 0.4) -> Gmm2dSpec:
    """Equal-weight mixture with means evenly spaced on a circle."""
    angles = 2.0 * np.pi * np.arange(k) / k
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    covs = np.tile(variance * np.eye(2), (k, 1, 1))
    return Gmm2dSpec(np.full(k, 1.0 / k), means, covs)


def sample_gmm2d(spec: Gmm2dSpec, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    return spec.sample(n, np.random.default_rng(seed))


def random_rotation(dim: int, seed) -> np.ndarray:
    """Haar-distributed rotation (orthogonal, det = +1)."""
    if dim < 2:
        raise ContractViolation("rotation dimension must be >= 2")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@dataclass
class SyntheticDataset:
    X: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,)
    rotation: np.ndarray  # R, (D, D)
    sigma_pad: float
    spec: Gmm2dSpec
    split: str = "train"
    seed: int = 0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def ancestor_projector(self) -> np.ndarray:
        """Pi = S R^T, the (2, D) map from data to generator coordinates."""
        return self.rotation[:, :2].T.copy()


def build_dataset(
    spec: Gmm2dSpec,
    dim: int,
    sigma_pad: float = 0.02,
    n_train: int = 60_000,
    n_val: int = 10_000,
    seed: int = 0,
    rotation: np.ndarray | None = None,
) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Generate train and validation splits sharing one rotation."""
    if dim < 2:
        raise ContractViolation("ambient dimension must be >= 2")
    rot_seq, train_seq, val_seq = np.random.SeedSequence(seed).spawn(3)
    R = random_rotation(dim, rot_seq) if rotation is None else np.asarray(rotation, dtype=np.float64)
    if R.shape != (dim, dim):
        raise ContractViolation(f"rotation must be ({dim}, {dim})")

    def make(n, seq, split):
        rng = np.random.default_rng(seq)
        u, labels = spec.sample(n, rng)
        w = sigma_pad * rng.standard_normal((n, dim - 2))
        z = np.concatenate([u, w], axis=1)
        return SyntheticDataset(z @ R.T, labels, R, float(sigma_pad), spec, split, int(seed))

    return make(n_train, train_seq, "train"), make(n_val, val_seq, "val")


def unrotate(x: np.ndarray, ds: SyntheticDataset) -> tuple[np.ndarray, np.ndarray]:
    z = np.atleast_2d(np.asarray(x, dtype=np.float64)) @ ds.rotation
    return z[:, :2], z[:, 2:]


def filler_logpdf(w: np.ndarray, sigma_pad: float) -> np.ndarray:
    m = w.shape[1]
    return -0.5 * np.sum(w * w, axis=1) / sigma_pad**2 - m * (np.log(sigma_pad) + 0.5 * LOG_2PI)


def oracle_logpdf(x: np.ndarray, ds: SyntheticDataset) -> np.ndarray:
    """Exact log p_X(x): mixture term on the generator plane plus filler term."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != ds.dim:
        raise ContractViolation(f"expected points of dimension {ds.dim}, got {x.shape[1]}")
    u, w = unrotate(x, ds)
    return ds.spec.logpdf(u) + filler_logpdf(w, ds.sigma_pad)


def ancestor_logpdf(x: np.ndarray, ds: SyntheticDataset) -> np.ndarray:
    """log p_2(Pi x), the 2D generator density of the point's ancestor."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != ds.dim:
        raise ContractViolation(f"expected points of dimension {ds.dim}, got {x.shape[1]}")
    return ds.spec.logpdf(x @ ds.ancestor_projector.T)
