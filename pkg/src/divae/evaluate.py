"""Turn a trained model and an evaluation split into a MetricsReport."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .metrics import (
    MetricsReport,
    kl_coverage,
    kl_posterior_prior,
    kl_q_p2,
    ks_two_sample,
    posterior_entropy,
    wasserstein1d,
    pairwise_mean,
)
from .synthgen import Gmm2dSpec
from .vae import VAE


def latent_pass(model: VAE, X: np.ndarray, eval_seed: int = 0, chunk: int = 2048) -> dict[str, np.ndarray]:
    """One posterior sample per point with a fixed noise stream.

    Returns per-point ``mu``, ``logvar``, ``z``, ``s`` and single-sample ``elbo``.
    """
    X = np.asarray(X, dtype=np.float64)
    d = model.cfg.latent_dim
    noise = np.random.default_rng(eval_seed).standard_normal((len(X), d))
    keys = ("mu", "logvar", "z", "s", "elbo")
    parts = {k: [] for k in keys}
    for i in range(0, len(X), chunk):
        terms = model.forward(ad.Tensor(X[i:i + chunk]), ad.Tensor(noise[i:i + chunk]))
        for k in keys:
            parts[k].append(terms[k].data.copy())
    return {k: np.concatenate(v) for k, v in parts.items()}


def evaluate(
    model: VAE,
    X: np.ndarray,
    reference: np.ndarray,
    *,
    spec: Gmm2dSpec | None = None,
    eval_seed: int = 0,
    kl_mc: int = 100_000,
    posterior_kl_mc: int = 128,
    prior: str = "",
    method: str = "",
    seed: int = 0,
    config_hash: str = "",
) -> tuple[MetricsReport, dict[str, np.ndarray]]:
    """Compute the evaluation metrics of one model on one split.

    ``reference`` is the log-density vector the log-prior values are
    compared against (generator density for synthetic data, the teacher's
    estimate otherwise). ``spec`` enables the generator-based metrics.
    """
    lat = latent_pass(model, X, eval_seed)
    reference = np.asarray(reference, dtype=np.float64)
    kl_prior = kl_posterior_prior(lat["mu"], lat["logvar"], model.prior, posterior_kl_mc, seed=eval_seed + 1)
    entropy = posterior_entropy(lat["mu"], lat["logvar"])
    rep = MetricsReport(
        prior=prior or model.prior.kind,
        method=method,
        seed=seed,
        n_eval=len(X),
        elbo_mean=pairwise_mean(lat["elbo"]),
        elbo_std=float(np.std(lat["elbo"])),
        s_mean=pairwise_mean(lat["s"]),
        s_std=float(np.std(lat["s"])),
        ref_mean=pairwise_mean(reference),
        ks=ks_two_sample(lat["s"], reference),
        wasserstein=wasserstein1d(lat["s"], reference),
        kl_q_prior=pairwise_mean(kl_prior),
        entropy=pairwise_mean(entropy),
        kl_mc=kl_mc if spec is not None else 0,
        posterior_kl_mc=posterior_kl_mc,
        config_hash=config_hash,
    )
    if spec is not None and model.cfg.latent_dim == 2:
        rep.coverage_kl, rep.coverage_kl_se = kl_coverage(spec, model.prior, kl_mc, seed=eval_seed + 2)
        rep.kl_q_p2 = pairwise_mean(kl_q_p2(lat["mu"], lat["logvar"], spec, posterior_kl_mc, seed=eval_seed + 3))
    lat["kl_q_prior"] = kl_prior
    lat["entropy"] = entropy
    lat["reference"] = reference
    return rep, lat
