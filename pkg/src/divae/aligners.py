"""Density alignment penalties and the training objective.

The alignment losses compare per-point log-prior values ``s_i = log p_Z(z_i)``
with teacher log-densities ``rho_i`` through a precision-weighted Huber
penalty, reduced as ``sqrt(mean(w_i * huber(residual_i)))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation
from .flow import FlowModel, flow_mle_loss
from .vae import VAE

METHODS = ("none", "direct", "flow")


@dataclass
class AlignConfig:
    method: str = "none"
    delta: float = 1.0
    detach_encoder: bool = False
    kl_start: float = 0.1
    kl_end: float = 1.0
    kl_warmup_fraction: float = 0.5

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractViolation(f"unknown alignment method {self.method!r}")
        if self.delta <= 0:
            raise ContractViolation("Huber delta must be positive")


def huber(e, delta: float = 1.0):
    """Huber penalty on plain numbers or arrays (the graph version is ``autodiff.huber``)."""
    e = np.asarray(e, dtype=np.float64)
    a = np.abs(e)
    return np.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))


def _weighted_root_mean_huber(resid: Tensor, sigma, delta: float) -> Tensor:
    w = np.asarray(sigma, dtype=np.float64) ** -2
    return ad.sqrt(ad.mean(ad.huber(resid, delta) * w))


def _check_batch(s: Tensor, rho, sigma) -> tuple[np.ndarray, np.ndarray]:
    rho = np.asarray(rho, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if s.shape[0] == 0:
        raise ContractViolation("alignment loss on an empty batch")
    if rho.shape != s.shape or sigma.shape != s.shape:
        raise ContractViolation(f"s {s.shape}, rho {rho.shape} and sigma {sigma.shape} must match")
    if np.any(sigma <= 0):
        raise ContractViolation("standard errors must be positive")
    return rho, sigma


def direct_align_loss(s, rho, sigma, delta: float = 1.0) -> Tensor:
    s = ad.as_tensor(s)
    rho, sigma = _check_batch(s, rho, sigma)
    return _weighted_root_mean_huber(s - rho, sigma, delta)


def flow_align_loss(s, rho, sigma, logdets, delta: float = 1.0) -> Tensor:
    """Alignment against ``rho + logdet J_f(z)``; the logdet carries no gradient."""
    s = ad.as_tensor(s)
    rho, sigma = _check_batch(s, rho, sigma)
    resid = s - rho - ad.stop_gradient(ad.as_tensor(logdets))
    return _weighted_root_mean_huber(resid, sigma, delta)


def schedules(epoch: int, total_epochs: int, config: AlignConfig | None = None) -> tuple[float, float]:
    """(gamma_t, kl_factor) for a 0-based epoch index."""
    cfg = config or AlignConfig()
    if total_epochs < 1 or not 0 <= epoch < total_epochs:
        raise ContractViolation(f"epoch {epoch} outside [0, {total_epochs})")
    gamma = 1.0 if total_epochs == 1 else min(1.0, max(0.0, epoch / (total_epochs - 1)))
    ramp = total_epochs * cfg.kl_warmup_fraction
    progress = 1.0 if ramp <= 0 else min(1.0, epoch / ramp)
    kl = cfg.kl_start + (cfg.kl_end - cfg.kl_start) * progress
    return gamma, kl


def total_loss(
    x,
    noise,
    model: VAE,
    config: AlignConfig,
    gamma: float,
    kl_factor: float,
    rho=None,
    sigma=None,
    u=None,
    flow: FlowModel | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Assemble the per-batch objective.

    none:   -ELBO
    direct: -ELBO + gamma * direct alignment
    flow:   -ELBO + gamma * flow-corrected alignment + flow maximum likelihood

    The KL part of the ELBO is scaled by ``kl_factor``. ``u`` are the PCA
    projections of the batch, needed only by the flow method.
    """
    terms = model.forward(x, noise)
    recon = ad.mean(terms["recon"])
    kl = ad.mean(terms["kl"])
    loss = kl_factor * kl - recon
    diag = {
        "elbo": float(recon.data - kl.data),
        "recon": float(recon.data),
        "kl": float(kl.data),
        "align": 0.0,
        "flow_ml": 0.0,
        "gamma": float(gamma),
        "kl_factor": float(kl_factor),
    }
    if config.method == "none":
        return loss, diag
    if rho is None or sigma is None:
        raise ContractViolation(f"method {config.method!r} needs teacher rho and sigma for the batch")
    z = terms["z"]
    if config.detach_encoder:
        s = model.prior_logpdf(ad.stop_gradient(z))
    else:
        s = terms["s"]
    if config.method == "direct":
        align = direct_align_loss(s, rho, sigma, config.delta)
        loss = loss + gamma * align
    else:
        if flow is None or u is None:
            raise ContractViolation("flow method needs a flow model and batch projections")
        _, logdet = flow.forward(z)
        align = flow_align_loss(s, rho, sigma, logdet, config.delta)
        ml = flow_mle_loss(u, flow, model.prior)
        loss = loss + gamma * align + ml
        diag["flow_ml"] = float(ml.data)
    diag["align"] = float(align.data)
    return loss, diag
