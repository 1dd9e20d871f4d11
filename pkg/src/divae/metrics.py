"""Evaluation metrics: distribution distances, coverage and posterior diagnostics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .errors import ContractViolation
from .synthgen import Gmm2dSpec

LOG_2PI = float(np.log(2.0 * np.pi))


def _as_sample(a, name: str) -> np.ndarray:
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    if a.size == 0:
        raise ContractViolation(f"{name}: empty sample")
    return a


def ks_two_sample(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|."""
    a, b = _as_sample(a, "ks"), _as_sample(b, "ks")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def wasserstein1d(a, b) -> float:
    """W1 distance between two empirical distributions on the line.

    Integrates ``|F_a - F_b|`` between consecutive breakpoints, which equals
    the integral of the absolute quantile difference.
    """
    a, b = _as_sample(a, "wasserstein"), _as_sample(b, "wasserstein")
    grid = np.sort(np.concatenate([a, b]))
    widths = np.diff(grid)
    fa = np.searchsorted(a, grid[:-1], side="right") / a.size
    fb = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * widths))


def _prior_logpdf_np(prior, z: np.ndarray, chunk: int = 20_000) -> np.ndarray:
    out = np.empty(len(z))
    for i in range(0, len(z), chunk):
        out[i:i + chunk] = prior.logpdf(ad.Tensor(z[i:i + chunk])).data
    return out


def kl_coverage(p2: Gmm2dSpec, prior, n_mc: int = 100_000, seed=0) -> tuple[float, float]:
    """Monte-Carlo KL(p2 || p_Z) with its standard error."""
    if getattr(prior, "d", 2) != 2:
        raise ContractViolation("coverage KL needs a 2-dimensional prior")
    u, _ = p2.sample(n_mc, np.random.default_rng(seed))
    diff = p2.logpdf(u) - _prior_logpdf_np(prior, u)
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(n_mc))


def kl_q_p2(mu: np.ndarray, logvar: np.ndarray, p2: Gmm2dSpec, n_mc: int = 128, seed=0) -> np.ndarray:
    """Per-point MC estimate of KL(q(z|x) || p2) for diagonal Gaussian posteriors."""
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    logvar = np.atleast_2d(np.asarray(logvar, dtype=np.float64))
    if mu.shape[1] != 2:
        raise ContractViolation("KL(q, p2) needs 2-dimensional posteriors")
    rng = np.random.default_rng(seed)
    n = mu.shape[0]
    eps = rng.standard_normal((n, n_mc, 2))
    z = mu[:, None, :] + np.exp(0.5 * logvar)[:, None, :] * eps
    logq = -0.5 * np.sum(eps**2 + logvar[:, None, :], axis=-1) - LOG_2PI
    logp = p2.logpdf(z.reshape(-1, 2)).reshape(n, n_mc)
    return np.mean(logq - logp, axis=1)


def posterior_entropy(mu, logvar) -> np.ndarray:
    """Closed-form entropy of diagonal Gaussian posteriors, one per row."""
    logvar = np.atleast_2d(np.asarray(logvar, dtype=np.float64))
    d = logvar.shape[1]
    return 0.5 * d * (1.0 + LOG_2PI) + 0.5 * np.sum(logvar, axis=1)


def kl_posterior_prior(mu, logvar, prior, n_mc: int = 128, seed=0) -> np.ndarray:
    """Per-point KL(q(z|x) || p_Z); analytic for the standard prior, MC otherwise."""
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    logvar = np.atleast_2d(np.asarray(logvar, dtype=np.float64))
    if prior.kind == "standard":
        return 0.5 * np.sum(mu**2 + np.exp(logvar) - 1.0 - logvar, axis=1)
    rng = np.random.default_rng(seed)
    n, d = mu.shape
    out = np.empty(n)
    rows = max(1, 20_000 // n_mc)
    for i in range(0, n, rows):
        m, lv = mu[i:i + rows], logvar[i:i + rows]
        eps = rng.standard_normal((len(m), n_mc, d))
        z = m[:, None, :] + np.exp(0.5 * lv)[:, None, :] * eps
        logq = -0.5 * np.sum(eps**2 + lv[:, None, :], axis=-1) - 0.5 * d * LOG_2PI
        logp = _prior_logpdf_np(prior, z.reshape(-1, d)).reshape(len(m), n_mc)
        out[i:i + rows] = np.mean(logq - logp, axis=1)
    return out


def pairwise_mean(x: np.ndarray) -> float:
    """Mean via math.fsum so that the result does not depend on summation order."""
    x = np.asarray(x, dtype=np.float64).ravel()
    return math.fsum(x) / x.size


@dataclass
class MetricsReport:
    prior: str = ""
    method: str = ""
    seed: int = 0
    n_eval: int = 0
    elbo_mean: float = float("nan")
    elbo_std: float = float("nan")
    s_mean: float = float("nan")
    s_std: float = float("nan")
    ref_mean: float = float("nan")
    ks: float = float("nan")
    wasserstein: float = float("nan")
    coverage_kl: float = float("nan")
    coverage_kl_se: float = float("nan")
    kl_q_p2: float = float("nan")
    kl_q_prior: float = float("nan")
    entropy: float = float("nan")
    kl_mc: int = 0
    posterior_kl_mc: int = 0
    config_hash: str = ""

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> dict:
        return asdict(self)


@dataclass
class OodShifts:
    d_elbo: float
    d_s: float
    d_kl: float
    d_entropy: float
    extra: dict = field(default_factory=dict)


def ood_shifts(in_report: MetricsReport, ood_report: MetricsReport) -> OodShifts:
    """OOD-minus-in-distribution shifts of the mean ELBO, log-prior, posterior-prior KL and entropy."""
    if in_report.config_hash != ood_report.config_hash:
        raise ContractViolation("OOD shifts need reports from the same model")
    return OodShifts(
        d_elbo=ood_report.elbo_mean - in_report.elbo_mean,
        d_s=ood_report.s_mean - in_report.s_mean,
        d_kl=ood_report.kl_q_prior - in_report.kl_q_prior,
        d_entropy=ood_report.entropy - in_report.entropy,
    )


def logmeanexp(a: np.ndarray, axis=None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = a.size if axis is None else a.shape[axis]
    return logsumexp(a, axis=axis) - np.log(n)
