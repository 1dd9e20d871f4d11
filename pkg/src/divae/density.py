"""PCA projection and external log-density teachers.

Every teacher returns, for each training point, a log-density ``rho`` in the
PCA space together with a standard error ``sigma``. The aligners turn
``sigma`` into precision weights ``sigma ** -2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import ContractViolation
from .synthgen import SyntheticDataset, ancestor_logpdf

log = logging.getLogger(__name__)

ESTIMATORS = ("oracle", "kde", "knn-adaptive")


@dataclass
class PcaProjector:
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (d, D), orthonormal rows
    explained_variance: np.ndarray  # (d,)

    @property
    def d(self) -> int:
        return self.components.shape[0]

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, U: np.ndarray) -> np.ndarray:
        return np.asarray(U, dtype=np.float64) @ self.components + self.mean


def fit_pca(X: np.ndarray, d: int) -> PcaProjector:
    """Top-``d`` principal directions via a thin SVD of the centred data.

    Each direction is signed so that its largest-magnitude loading is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    n, D = X.shape
    if d < 1 or d > D:
        raise ContractViolation(f"fit_pca: need 1 <= d <= D={D}, got d={d}")
    if n <= d:
        raise ContractViolation(f"fit_pca: need more than d={d} points, got {n}")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:d].copy()
    idx = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(d), idx])[:, None]
    return PcaProjector(mean, comps, s[:d] ** 2 / (n - 1))


@dataclass
class DensityEstimate:
    rho: np.ndarray
    sigma: np.ndarray
    estimator: str
    projector: PcaProjector | None = None
    k_hat: np.ndarray | None = None
    fallback: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.estimator not in ESTIMATORS:
            raise ContractViolation(f"unknown estimator tag {self.estimator!r}")
        if self.rho.shape != self.sigma.shape or self.rho.ndim != 1:
            raise ContractViolation("rho and sigma must be 1-D arrays of equal length")
        if not np.all(np.isfinite(self.rho)):
            raise ContractViolation("rho must be finite")
        if not np.all(self.sigma > 0):
            raise ContractViolation("sigma must be strictly positive")

    @property
    def n(self) -> int:
        return len(self.rho)

    @property
    def weights(self) -> np.ndarray:
        return self.sigma ** -2


def silverman_bandwidth(U: np.ndarray) -> float:
    """Silverman's rule of thumb, averaged over dimensions for an isotropic kernel."""
    n, d = U.shape
    factor = (4.0 / (d + 2)) ** (1.0 / (d + 4)) * n ** (-1.0 / (d + 4))
    return float(factor * np.mean(U.std(axis=0, ddof=1)))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def _row_chunks(n: int, m: int, budget: int = 4_000_000):
    step = max(1, budget // max(m, 1))
    for i0 in range(0, n, step):
        yield i0, min(n, i0 + step)


def kde_logdensity(U: np.ndarray, bandwidth: float | None = None) -> DensityEstimate:
    """Leave-one-out Gaussian KDE; ``sigma`` is 1 everywhere."""
    U = np.asarray(U, dtype=np.float64)
    n, d = U.shape
    if n < 2:
        raise ContractViolation("kde needs at least two points")
    h = silverman_bandwidth(U) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ContractViolation("kde bandwidth must be positive")
    rho = np.empty(n)
    for i0, i1 in _row_chunks(n, n):
        logk = -_sq_dists(U[i0:i1], U) / (2.0 * h * h)
        logk[np.arange(i1 - i0), np.arange(i0, i1)] = -np.inf
        rho[i0:i1] = logsumexp(logk, axis=1)
    rho -= np.log(n - 1) + 0.5 * d * np.log(2.0 * np.pi * h * h)
    return DensityEstimate(rho, np.ones(n), "kde")


def knn_distances(U: np.ndarray, k: int, index: str = "brute") -> np.ndarray:
    """Sorted distances to the ``k`` nearest other points, shape (N, k).

    ``index="brute"`` computes all pairwise distances in row chunks;
    ``index="kdtree"`` uses scipy's exact k-d tree. Both exclude the query
    point itself by position, so duplicates count as neighbours at distance 0.
    """
    U = np.asarray(U, dtype=np.float64)
    n = U.shape[0]
    if not 1 <= k < n:
        raise ContractViolation(f"need 1 <= k < N, got k={k}, N={n}")
    if index == "kdtree":
        from scipy.spatial import cKDTree

        dist, idx = cKDTree(U).query(U, k=k + 1)
        is_self = idx == np.arange(n)[:, None]
        # drop the self entry, or the farthest one if self was displaced by duplicates
        drop = np.where(is_self.any(axis=1), is_self.argmax(axis=1), k)
        keep = np.ones_like(is_self)
        keep[np.arange(n), drop] = False
        return dist[keep].reshape(n, k)
    if index != "brute":
        raise ContractViolation(f"unknown neighbour index {index!r}")
    out = np.empty((n, k))
    for i0, i1 in _row_chunks(n, n):
        d2 = _sq_dists(U[i0:i1], U)
        d2[np.arange(i1 - i0), np.arange(i0, i1)] = np.inf
        part = np.partition(d2, k - 1, axis=1)[:, :k]
        out[i0:i1] = np.sqrt(np.sort(part, axis=1))
    return out


def log_unit_ball_volume(d: int) -> float:
    return 0.5 * d * np.log(np.pi) - gammaln(0.5 * d + 1.0)


def knn_log_density(k: np.ndarray | int, r: np.ndarray, n: int, d: int) -> np.ndarray:
    """Plain kNN estimator: ln k - ln N - ln(omega_d r^d)."""
    return np.log(k) - np.log(n) - log_unit_ball_volume(d) - d * np.log(r)


def candidate_ks(k_max: int, k_min: int = 4) -> list[int]:
    ks = []
    k = k_min
    while k < k_max:
        ks.append(k)
        k *= 2
    ks.append(k_max)
    return ks


def knn_logdensity_adaptive(
    U: np.ndarray,
    k_max: int = 64,
    z: float = 2.0,
    index: str = "brute",
    fixed_k: bool = False,
) -> DensityEstimate:
    """Point-adaptive kNN log-density with a per-point standard error.

    For each point the neighbourhood grows through k = 4, 8, 16, ... up to
    ``k_max`` while consecutive estimates agree within ``z`` combined
    standard errors; ``sigma_i = k_hat_i ** -0.5``. ``fixed_k=True`` skips the
    test and uses ``k_max`` everywhere.
    """
    U = np.asarray(U, dtype=np.float64)
    n, d = U.shape
    if not 4 <= k_max < n:
        raise ContractViolation(f"knn: need 4 <= k_max < N, got k_max={k_max}, N={n}")
    dist = knn_distances(U, k_max, index=index)
    ks = np.array([k_max] if fixed_k else candidate_ks(k_max))
    r = dist[:, ks - 1]
    with np.errstate(divide="ignore"):
        rho_k = knn_log_density(ks[None, :], r, n, d)
    sig_k = ks ** -0.5

    k_hat = np.full(n, ks[0])
    rho = rho_k[:, 0].copy()
    active = np.ones(n, dtype=bool)
    # inf - inf on duplicate points gives NaN, which fails the test as intended
    with np.errstate(invalid="ignore"):
        for c in range(1, len(ks)):
            ok = active & (np.abs(rho_k[:, c] - rho_k[:, c - 1]) <= z * (sig_k[c] + sig_k[c - 1]))
            k_hat[ok] = ks[c]
            rho[ok] = rho_k[ok, c]
            active = ok

    fallback = ~np.isfinite(rho)
    if fallback.any():
        r_max = dist[:, k_max - 1]
        positive = r_max[r_max > 0]
        floor = positive.min() if positive.size else 1.0
        k_hat[fallback] = k_max
        rho[fallback] = knn_log_density(k_max, np.maximum(r_max[fallback], floor), n, d)
        log.warning("knn: %d points with duplicate neighbourhoods fell back to k=%d",
                    int(fallback.sum()), k_max)
    return DensityEstimate(rho, k_hat ** -0.5, "knn-adaptive", k_hat=k_hat, fallback=fallback)


def oracle_teacher(ds) -> DensityEstimate:
    """Ground-truth 2D generator log-density for each point of a synthetic split."""
    if not isinstance(ds, SyntheticDataset):
        raise ContractViolation("oracle teacher needs a synthetic dataset with generator metadata")
    rho = ancestor_logpdf(ds.X, ds)
    return DensityEstimate(rho, np.ones_like(rho), "oracle")


def estimate_teacher(
    X: np.ndarray,
    estimator: str,
    d: int,
    dataset: SyntheticDataset | None = None,
    k_max: int = 64,
    bandwidth: float | None = None,
    index: str = "brute",
) -> DensityEstimate:
    """Fit PCA to ``X`` and attach the requested log-density estimate."""
    projector = fit_pca(X, d)
    if estimator == "oracle":
        est = oracle_teacher(dataset)
    elif estimator == "kde":
        est = kde_logdensity(projector.transform(X), bandwidth)
    elif estimator == "knn-adaptive":
        est = knn_logdensity_adaptive(projector.transform(X), k_max=k_max, index=index)
    else:
        raise ContractViolation(f"unknown estimator {estimator!r}")
    est.projector = projector
    return est
