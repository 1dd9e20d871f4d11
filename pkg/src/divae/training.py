"""Minibatch training loop with resumable state."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .aligners import AlignConfig, schedules, total_loss
from .density import DensityEstimate
from .errors import ContractViolation, NumericFailure
from .flow import FlowModel
from .io import load_checkpoint, save_checkpoint
from .optim import Adam
from .vae import VAE, VaeConfig

EPOCH_COLUMNS = ["epoch", "elbo", "align_loss", "flow_ml", "gamma", "kl_factor", "t_batch", "t_epoch"]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    flow_layers: int = 5
    flow_hidden: int = 16
    flow_bound: float = 2.0


class Trainer:
    """Owns a model (plus flow), its optimizer and the data order.

    The random stream drives both the per-epoch shuffles and the
    reparameterisation noise; its state is part of the checkpoint, so a
    resumed run draws exactly the numbers the uninterrupted run would have.
    """

    def __init__(
        self,
        model: VAE,
        X: np.ndarray,
        align: AlignConfig,
        train: TrainConfig,
        teacher: DensityEstimate | None = None,
        U: np.ndarray | None = None,
    ):
        self.model = model
        self.X = np.asarray(X, dtype=np.float64)
        self.align = align
        self.cfg = train
        self.teacher = teacher
        if align.method != "none":
            if teacher is None:
                raise ContractViolation(f"method {align.method!r} needs a density teacher")
            if teacher.n != len(self.X):
                raise ContractViolation(f"teacher covers {teacher.n} points, data has {len(self.X)}")
        self.flow = None
        self.U = None
        if align.method == "flow":
            if U is None:
                if teacher.projector is None:
                    raise ContractViolation("flow method needs PCA projections of the training data")
                U = teacher.projector.transform(self.X)
            self.U = np.asarray(U, dtype=np.float64)
            self.flow = FlowModel(model.cfg.latent_dim, train.flow_layers, train.flow_hidden,
                                  seed=train.seed + 10_000, bound=train.flow_bound)
        self.params = dict(model.parameters())
        if self.flow is not None:
            self.params.update(self.flow.parameters())
        self.opt = Adam(self.params, lr=train.lr)
        self.rng = np.random.default_rng([train.seed, 1])
        self.epoch = 0
        self.pos = 0
        self.perm: np.ndarray | None = None
        self._acc: list[dict] = []

    @property
    def n_batches(self) -> int:
        return -(-len(self.X) // self.cfg.batch_size)

    @property
    def done(self) -> bool:
        return self.epoch >= self.cfg.epochs

    def step(self) -> tuple[float, dict]:
        """One optimizer step on the next minibatch; returns (loss, diagnostics)."""
        if self.done:
            raise ContractViolation("training already finished")
        if self.perm is None:
            self.perm = self.rng.permutation(len(self.X))
            self.pos = 0
        idx = self.perm[self.pos:self.pos + self.cfg.batch_size]
        gamma, kl_factor = schedules(self.epoch, self.cfg.epochs, self.align)
        noise = self.rng.standard_normal((len(idx), self.model.cfg.latent_dim))
        rho = sigma = u = None
        if self.teacher is not None and self.align.method != "none":
            rho, sigma = self.teacher.rho[idx], self.teacher.sigma[idx]
        if self.U is not None:
            u = self.U[idx]
        self.opt.zero_grad()
        loss, diag = total_loss(self.X[idx], noise, self.model, self.align, gamma, kl_factor,
                                rho=rho, sigma=sigma, u=u, flow=self.flow)
        if not np.isfinite(loss.data):
            raise NumericFailure("total_loss", f"non-finite loss at epoch {self.epoch}")
        ad.backward(loss)
        self.opt.step()
        self.pos += self.cfg.batch_size
        if self.pos >= len(self.X):
            self.perm = None
            self.pos = 0
            self.epoch += 1
        return float(loss.data), diag

    def run_epoch(self) -> dict:
        """Finish the current epoch and return its averaged diagnostics and timings."""
        epoch = self.epoch
        rows = []
        times = []
        t0 = time.perf_counter()
        while self.epoch == epoch:
            tb = time.perf_counter()
            _, diag = self.step()
            times.append(time.perf_counter() - tb)
            rows.append(diag)
        t_epoch = time.perf_counter() - t0
        return {
            "epoch": epoch,
            "elbo": float(np.mean([r["elbo"] for r in rows])),
            "align_loss": float(np.mean([r["align"] for r in rows])),
            "flow_ml": float(np.mean([r["flow_ml"] for r in rows])),
            "gamma": rows[0]["gamma"],
            "kl_factor": rows[0]["kl_factor"],
            "t_batch": float(np.mean(times)),
            "t_epoch": t_epoch,
        }

    def fit(self, callback=None) -> list[dict]:
        history = []
        while not self.done:
            row = self.run_epoch()
            history.append(row)
            if callback is not None:
                callback(row)
        return history

    # ------------------------------------------------------------ persistence

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        tensors = {name: p.data.copy() for name, p in self.params.items()}
        st = self.opt.state
        for name in st.m:
            tensors[f"adam/m/{name}"] = st.m[name].copy()
            tensors[f"adam/v/{name}"] = st.v[name].copy()
        if self.perm is not None:
            tensors["trainer/perm"] = self.perm.astype(np.float64)
        meta = {
            "vae": asdict(self.model.cfg),
            "align": asdict(self.align),
            "train": asdict(self.cfg),
            "epoch": self.epoch,
            "pos": self.pos,
            "adam_t": st.t,
            "rng": self.rng.bit_generator.state,
        }
        return meta, tensors

    def save(self, path) -> None:
        meta, tensors = self.state()
        save_checkpoint(path, meta, tensors)

    def load_state(self, meta: dict, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in tensors:
                raise ContractViolation(f"checkpoint lacks parameter {name!r}")
            if tensors[name].shape != p.data.shape:
                raise ContractViolation(f"checkpoint shape mismatch for {name!r}")
            p.data[...] = tensors[name]
        st = self.opt.state
        st.t = int(meta["adam_t"])
        st.m = {k[len("adam/m/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam/m/")}
        st.v = {k[len("adam/v/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam/v/")}
        self.epoch = int(meta["epoch"])
        self.pos = int(meta["pos"])
        perm = tensors.get("trainer/perm")
        self.perm = None if perm is None else perm.astype(np.int64)
        self.rng.bit_generator.state = meta["rng"]


def model_from_checkpoint(path) -> tuple[VAE, FlowModel | None, dict]:
    """Rebuild the trained VAE (and flow, if any) from a checkpoint."""
    meta, tensors = load_checkpoint(path)
    cfg = VaeConfig(**meta["vae"])
    train = TrainConfig(**meta["train"])
    pseudo = tensors.get("prior/pseudo_inputs")
    model = VAE(cfg, seed=train.seed, pseudo_inputs=pseudo)
    flow = None
    if meta["align"]["method"] == "flow":
        flow = FlowModel(cfg.latent_dim, train.flow_layers, train.flow_hidden, seed=train.seed + 10_000,
                         bound=train.flow_bound)
    params = dict(model.parameters())
    if flow is not None:
        params.update(flow.parameters())
    for name, p in params.items():
        p.data[...] = tensors[name]
    return model, flow, meta
