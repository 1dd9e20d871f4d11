"""Encoder, decoder, priors and the single-sample ELBO."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation
from .nn import MLP

LOG_2PI = float(np.log(2.0 * np.pi))
PRIORS = ("standard", "gmm", "vamp")
LIKELIHOODS = ("gaussian", "bernoulli")
BERNOULLI_EPS = 1e-7


@dataclass
class VaeConfig:
    input_dim: int
    latent_dim: int = 2
    hidden: int | None = None  # defaults to input_dim // 2
    likelihood: str = "gaussian"
    sigma_x: float = 0.02
    prior: str = "standard"
    prior_components: int = 4
    hidden_activation: str = "tanh"
    logvar_clip: float = 10.0

    def __post_init__(self):
        if self.hidden is None:
            self.hidden = max(1, self.input_dim // 2)
        if self.prior not in PRIORS:
            raise ContractViolation(f"unknown prior {self.prior!r}")
        if self.likelihood not in LIKELIHOODS:
            raise ContractViolation(f"unknown likelihood {self.likelihood!r}")


def diag_gaussian_logpdf(z: Tensor, mu: Tensor, logvar: Tensor) -> Tensor:
    """Sum over the last axis of log N(z; mu, exp(logvar)); broadcasts."""
    d = z.shape[-1]
    quad = ad.square(z - mu) * ad.exp(-logvar)
    return -0.5 * ad.sum_(quad + logvar, axis=-1) - 0.5 * d * LOG_2PI


class Encoder:
    def __init__(self, cfg: VaeConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.net = MLP((cfg.input_dim, cfg.hidden, 2 * cfg.latent_dim), rng, cfg.hidden_activation)

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        d = self.cfg.latent_dim
        h = self.net(ad.as_tensor(x))
        mu = ad.slice_last(h, 0, d)
        logvar = ad.clip(ad.slice_last(h, d, 2 * d), -self.cfg.logvar_clip, self.cfg.logvar_clip)
        return mu, logvar

    def parameters(self, prefix: str = "encoder/") -> dict[str, Tensor]:
        return self.net.parameters(prefix)


class Decoder:
    def __init__(self, cfg: VaeConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.net = MLP((cfg.latent_dim, cfg.hidden, cfg.input_dim), rng, cfg.hidden_activation)

    def __call__(self, z: Tensor) -> Tensor:
        """Gaussian mean, or Bernoulli probabilities clamped away from 0 and 1."""
        out = self.net(z)
        if self.cfg.likelihood == "bernoulli":
            out = ad.clip(ad.sigmoid(out), BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)
        return out

    def parameters(self, prefix: str = "decoder/") -> dict[str, Tensor]:
        return self.net.parameters(prefix)


def gaussian_loglik(x, mean: Tensor, sigma_x: float) -> Tensor:
    resid = ad.as_tensor(x) - mean
    const = -0.5 * np.log(2.0 * np.pi * sigma_x**2) * mean.shape[-1]
    return ad.sum_(ad.square(resid), axis=-1) * (-0.5 / sigma_x**2) + const


def bernoulli_loglik(x, probs: Tensor) -> Tensor:
    xd = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if np.any(xd < 0) or np.any(xd > 1):
        raise ContractViolation("Bernoulli targets must lie in [0, 1]")
    return ad.sum_(xd * ad.log(probs) + (1.0 - xd) * ad.log(1.0 - probs), axis=-1)


# ----------------------------------------------------------------- priors


class StandardPrior:
    kind = "standard"

    def __init__(self, d: int):
        self.d = d

    def logpdf(self, z) -> Tensor:
        z = ad.as_tensor(z)
        return -0.5 * ad.sum_(ad.square(z), axis=-1) - 0.5 * self.d * LOG_2PI

    def parameters(self, prefix: str = "prior/") -> dict[str, Tensor]:
        return {}


class GmmPrior:
    """Mixture of diagonal Gaussians with learnable weights, means and scales."""

    kind = "gmm"

    def __init__(self, d: int, n_components: int, rng: np.random.Generator, init_scale: float = 1.0):
        self.d = d
        self.logits = ad.parameter(np.zeros(n_components))
        self.means = ad.parameter(init_scale * rng.standard_normal((n_components, d)))
        self.log_scales = ad.parameter(np.zeros((n_components, d)))

    @property
    def n_components(self) -> int:
        return self.logits.shape[0]

    def component_logpdf(self, z) -> Tensor:
        z = ad.as_tensor(z)
        k, d = self.means.shape
        zz = ad.reshape(z, (z.shape[0], 1, d))
        diff = (zz - ad.reshape(self.means, (1, k, d))) * ad.exp(-ad.reshape(self.log_scales, (1, k, d)))
        return -0.5 * ad.sum_(ad.square(diff), axis=-1) - ad.sum_(self.log_scales, axis=-1) - 0.5 * d * LOG_2PI

    def logpdf(self, z) -> Tensor:
        return ad.logsumexp(self.component_logpdf(z) + ad.log_softmax(self.logits), axis=-1)

    def parameters(self, prefix: str = "prior/") -> dict[str, Tensor]:
        return {
            f"{prefix}logits": self.logits,
            f"{prefix}means": self.means,
            f"{prefix}log_scales": self.log_scales,
        }


class VampPrior:
    """Uniform mixture of encoder posteriors at learnable pseudo-inputs."""

    kind = "vamp"

    def __init__(self, encoder: Encoder, pseudo_inputs: np.ndarray):
        self.encoder = encoder
        self.d = encoder.cfg.latent_dim
        self.pseudo = ad.parameter(pseudo_inputs)

    @property
    def n_components(self) -> int:
        return self.pseudo.shape[0]

    def logpdf(self, z) -> Tensor:
        z = ad.as_tensor(z)
        k, d = self.n_components, self.d
        mu, logvar = self.encoder(self.pseudo)
        zz = ad.reshape(z, (z.shape[0], 1, d))
        comp = diag_gaussian_logpdf(zz, ad.reshape(mu, (1, k, d)), ad.reshape(logvar, (1, k, d)))
        return ad.logsumexp(comp, axis=-1) - np.log(k)

    def parameters(self, prefix: str = "prior/") -> dict[str, Tensor]:
        return {f"{prefix}pseudo_inputs": self.pseudo}


def kl_standard(mu: Tensor, logvar: Tensor) -> Tensor:
    """Closed-form KL(N(mu, diag exp(logvar)) || N(0, I)) per row."""
    return 0.5 * ad.sum_(ad.square(mu) + ad.exp(logvar) - 1.0 - logvar, axis=-1)


class VAE:
    def __init__(self, cfg: VaeConfig, seed: int = 0, pseudo_inputs: np.ndarray | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        if cfg.prior == "standard":
            self.prior = StandardPrior(cfg.latent_dim)
        elif cfg.prior == "gmm":
            self.prior = GmmPrior(cfg.latent_dim, cfg.prior_components, rng)
        else:
            if pseudo_inputs is None:
                pseudo_inputs = 0.1 * rng.standard_normal((cfg.prior_components, cfg.input_dim))
            pseudo_inputs = np.asarray(pseudo_inputs, dtype=np.float64)
            if pseudo_inputs.shape != (cfg.prior_components, cfg.input_dim):
                raise ContractViolation("pseudo-inputs must be (prior_components, input_dim)")
            self.prior = VampPrior(self.encoder, pseudo_inputs)

    def parameters(self) -> dict[str, Tensor]:
        out = self.encoder.parameters()
        out.update(self.decoder.parameters())
        out.update(self.prior.parameters())
        return out

    def encode(self, x) -> tuple[Tensor, Tensor]:
        return self.encoder(x)

    @staticmethod
    def reparameterize(mu: Tensor, logvar: Tensor, noise) -> Tensor:
        return mu + ad.exp(0.5 * logvar) * noise

    def decoder_loglik(self, x, z: Tensor) -> Tensor:
        out = self.decoder(z)
        if self.cfg.likelihood == "gaussian":
            return gaussian_loglik(x, out, self.cfg.sigma_x)
        return bernoulli_loglik(x, out)

    def prior_logpdf(self, z) -> Tensor:
        return self.prior.logpdf(z)

    def kl_term(self, mu: Tensor, logvar: Tensor, z: Tensor, log_prior: Tensor) -> Tensor:
        if self.prior.kind == "standard":
            return kl_standard(mu, logvar)
        return diag_gaussian_logpdf(z, mu, logvar) - log_prior

    def forward(self, x, noise) -> dict[str, Tensor]:
        """Per-point terms of the single-sample ELBO for a batch.

        Returns ``recon``, ``kl``, ``elbo`` (all shape (B,)), the sampled
        ``z``, the posterior ``mu``/``logvar`` and ``s = log p_Z(z)``.
        """
        mu, logvar = self.encode(x)
        z = self.reparameterize(mu, logvar, noise)
        s = self.prior_logpdf(z)
        recon = self.decoder_loglik(x, z)
        kl = self.kl_term(mu, logvar, z, s)
        return {"mu": mu, "logvar": logvar, "z": z, "s": s, "recon": recon, "kl": kl, "elbo": recon - kl}

    def elbo_point(self, x, noise) -> Tensor:
        return self.forward(x, noise)["elbo"]


def make_vae(cfg: VaeConfig, seed: int = 0, data: np.ndarray | None = None) -> VAE:
    """Build a VAE; a VampPrior takes its pseudo-inputs from ``data`` rows when given."""
    pseudo = None
    if cfg.prior == "vamp" and data is not None:
        rng = np.random.default_rng([seed, 7])
        idx = rng.choice(len(data), size=cfg.prior_components, replace=False)
        pseudo = np.asarray(data[idx], dtype=np.float64).copy()
    return VAE(cfg, seed=seed, pseudo_inputs=pseudo)
