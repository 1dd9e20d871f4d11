"""Affine coupling flow ``f: Z -> U`` with exact log-determinants."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, NumericFailure
from .nn import MLP


def coupling_mask(d: int, parity: int) -> np.ndarray:
    """1 on the conditioning coordinates. Even layers keep even indices fixed."""
    return (np.arange(d) % 2 == parity % 2).astype(np.float64)


class CouplingLayer:
    """``u = z * exp(s(m*z)) + t(m*z)`` on the coordinates where ``m == 0``.

    The scale is ``bound * tanh(net)``, with a learnable per-coordinate bound.
    Final layers of both networks start at zero, so a fresh layer is the
    identity map.
    """

    def __init__(self, d: int, parity: int, hidden: int, rng: np.random.Generator, bound: float = 2.0):
        if d < 2:
            raise ContractViolation("coupling layers need d >= 2")
        self.d = d
        self.mask = coupling_mask(d, parity)
        self.free = 1.0 - self.mask
        self.scale_net = MLP((d, hidden, d), rng, "tanh", zero_last=True)
        self.shift_net = MLP((d, hidden, d), rng, "tanh", zero_last=True)
        self.bound = ad.parameter(np.full(d, float(bound)))

    def _scale_shift(self, fixed: Tensor) -> tuple[Tensor, Tensor]:
        s = ad.tanh(self.scale_net(fixed)) * self.bound * self.free
        t = self.shift_net(fixed) * self.free
        return s, t

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        s, t = self._scale_shift(z * self.mask)
        return z * ad.exp(s) + t, ad.sum_(s, axis=-1)

    def inverse(self, u: Tensor) -> tuple[Tensor, Tensor]:
        s, t = self._scale_shift(u * self.mask)
        return (u - t) * ad.exp(-s), -ad.sum_(s, axis=-1)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = self.scale_net.parameters(f"{prefix}scale.")
        out.update(self.shift_net.parameters(f"{prefix}shift."))
        out[f"{prefix}bound"] = self.bound
        return out


def _check_finite(x: Tensor, where: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericFailure(where, "non-finite value in flow")


class FlowModel:
    def __init__(self, d: int, n_layers: int = 5, hidden: int = 16, seed: int = 0, bound: float = 2.0):
        if n_layers < 1:
            raise ContractViolation("flow needs at least one layer")
        rng = np.random.default_rng(seed)
        self.d = d
        self.layers = [CouplingLayer(d, i, hidden, rng, bound) for i in range(n_layers)]

    def forward(self, z, per_layer: bool = False):
        """Map z to u; returns ``(u, logdet J_f(z))`` (plus per-layer logdets)."""
        x = ad.as_tensor(z)
        if x.shape[-1] != self.d:
            raise ContractViolation(f"flow expects dimension {self.d}, got {x.shape[-1]}")
        parts = []
        for layer in self.layers:
            x, ld = layer.forward(x)
            _check_finite(x, "flow_forward")
            parts.append(ld)
        total = parts[0]
        for ld in parts[1:]:
            total = total + ld
        return (x, total, parts) if per_layer else (x, total)

    def inverse(self, u):
        """Map u to z; returns ``(z, logdet J_{f^-1}(u))``."""
        x = ad.as_tensor(u)
        if x.shape[-1] != self.d:
            raise ContractViolation(f"flow expects dimension {self.d}, got {x.shape[-1]}")
        total = None
        for layer in reversed(self.layers):
            x, ld = layer.inverse(x)
            _check_finite(x, "flow_inverse")
            total = ld if total is None else total + ld
        return x, total

    def parameters(self, prefix: str = "flow/") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}{i}."))
        return out


def flow_mle_loss(u, flow: FlowModel, prior) -> Tensor:
    """Mean negative log-likelihood of projections u under the pushforward of the prior."""
    z, logdet_inv = flow.inverse(u)
    return -ad.mean(prior.logpdf(z) + logdet_inv)
