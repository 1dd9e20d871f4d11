"""Experiment configuration as a flat ``key = value`` text file.

Lines starting with ``#`` are comments. Lists are comma separated. Unknown
keys are errors, and validation reports every bad field at once.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ContractViolation

TEACHERS = ("oracle", "kde", "knn-adaptive")
PRIOR_NAMES = ("standard", "gmm", "vamp")
METHOD_NAMES = ("none", "direct", "flow")


class ConfigError(ContractViolation):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "synthetic"  # synthetic | mnist
    k: int = 4
    dim: int = 50
    sigma_pad: float = 0.02
    n_train: int = 60_000
    n_val: int = 10_000
    data_seed: int = 2031965
    ood_k: int = 8
    ood_data_seed: int = 6032000
    mnist_dir: str = ""
    ood_mnist_dir: str = ""
    # teacher
    teacher: str = "knn-adaptive"
    knn_k_max: int = 64
    kde_bandwidth: float = 0.0  # 0 selects Silverman's rule
    # model
    priors: list = field(default_factory=lambda: ["standard", "gmm"])
    methods: list = field(default_factory=lambda: ["none", "direct", "flow"])
    latent_dim: int = 0  # 0: 2 for synthetic, 10 for MNIST
    hidden: int = 0  # 0: dim // 2 for synthetic, 300 for MNIST
    prior_components: int = 0  # 0: k for synthetic, 10 for MNIST
    hidden_activation: str = "tanh"
    sigma_x: float = 0.02
    # alignment
    huber_delta: float = 1.0
    detach_encoder: bool = False
    # training
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 100
    flow_layers: int = 5
    flow_hidden: int = 16
    flow_bound: float = 2.0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    # evaluation
    eval_seed: int = 0
    kl_mc: int = 100_000
    posterior_kl_mc: int = 128
    timing_epochs: int = 3
    out: str = "runs"

    # ------------------------------------------------------------ derived
    @property
    def is_synthetic(self) -> bool:
        return self.dataset == "synthetic"

    @property
    def d(self) -> int:
        return self.latent_dim or (2 if self.is_synthetic else 10)

    @property
    def hidden_units(self) -> int:
        return self.hidden or (self.dim // 2 if self.is_synthetic else 300)

    @property
    def n_components(self) -> int:
        return self.prior_components or (self.k if self.is_synthetic else 10)

    @property
    def likelihood(self) -> str:
        return "gaussian" if self.is_synthetic else "bernoulli"

    # ------------------------------------------------------------ checking
    def problems(self) -> list[str]:
        p = []
        if self.dataset not in ("synthetic", "mnist"):
            p.append(f"dataset: expected synthetic or mnist, got {self.dataset!r}")
        if self.teacher not in TEACHERS:
            p.append(f"teacher: expected one of {TEACHERS}, got {self.teacher!r}")
        if self.teacher == "oracle" and not self.is_synthetic:
            p.append("teacher: oracle is only available for synthetic data")
        for name in self.priors:
            if name not in PRIOR_NAMES:
                p.append(f"priors: unknown prior {name!r}")
        for name in self.methods:
            if name not in METHOD_NAMES:
                p.append(f"methods: unknown method {name!r}")
        if not self.priors:
            p.append("priors: at least one prior is required")
        if not self.methods:
            p.append("methods: at least one method is required")
        if not self.seeds:
            p.append("seeds: at least one seed is required")
        if self.hidden_activation not in ("tanh", "identity"):
            p.append(f"hidden_activation: expected tanh or identity, got {self.hidden_activation!r}")
        positive = ("k", "n_train", "n_val", "batch_size", "epochs", "flow_layers", "flow_hidden",
                    "kl_mc", "posterior_kl_mc", "timing_epochs", "ood_k")
        for name in positive:
            if getattr(self, name) < 1:
                p.append(f"{name}: must be >= 1")
        for name in ("sigma_pad", "sigma_x", "lr", "huber_delta", "flow_bound"):
            if not getattr(self, name) > 0:
                p.append(f"{name}: must be > 0")
        if self.dim < 2:
            p.append("dim: must be >= 2")
        if self.kde_bandwidth < 0:
            p.append("kde_bandwidth: must be >= 0")
        if not 4 <= self.knn_k_max < self.n_train:
            p.append("knn_k_max: must satisfy 4 <= knn_k_max < n_train")
        if self.latent_dim < 0 or self.hidden < 0 or self.prior_components < 0:
            p.append("latent_dim, hidden, prior_components: must be >= 0 (0 = automatic)")
        if self.is_synthetic and self.d > self.dim:
            p.append("latent_dim: cannot exceed dim")
        if not self.is_synthetic and not self.mnist_dir:
            p.append("mnist_dir: required for dataset = mnist (or set DIVAE_DATA_DIR)")
        return p

    def validate(self) -> "ExperimentConfig":
        p = self.problems()
        if p:
            raise ConfigError(p)
        return self

    # ------------------------------------------------------------ text form
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self, exclude=("out", "seeds", "priors", "methods")) -> str:
        text = "\n".join(l for l in self.to_text().splitlines() if l.split(" = ")[0] not in exclude)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def cell_hash(self, prior: str, method: str, seed: int) -> str:
        return hashlib.sha256(f"{self.digest()}|{prior}|{method}|{seed}".encode()).hexdigest()[:16]


_FIELD_TYPES = {f.name: f for f in fields(ExperimentConfig)}
_INT_LISTS = {"seeds"}


def _convert(name: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, list):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        return [int(x) for x in items] if name in _INT_LISTS else items
    return raw


def parse_overrides(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply ``key = value`` lines to ``base`` (defaults when omitted)."""
    base = base or ExperimentConfig()
    updates = {}
    problems = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value', got {line!r}")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            problems.append(f"line {lineno}: unknown key {key!r}")
            continue
        try:
            updates[key] = _convert(key, raw, getattr(base, key))
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    if problems:
        raise ConfigError(problems)
    return replace(base, **updates)


def from_text(text: str) -> ExperimentConfig:
    return parse_overrides(text, ExperimentConfig())


# fallback location of the IDX files when ``mnist_dir`` is left empty
DATA_DIR_ENV = "DIVAE_DATA_DIR"

PRESETS = {
    "full": {},
    # ~20x fewer optimizer steps than the full schedule, hence the larger step size
    "desk": {"n_train": 10_000, "n_val": 2_000, "epochs": 30, "seeds": [0, 1, 2], "lr": 3e-3},
}


def load_config(path=None, preset: str = "full", **overrides) -> ExperimentConfig:
    if preset not in PRESETS:
        raise ConfigError([f"preset: unknown preset {preset!r} (choose from {sorted(PRESETS)})"])
    cfg = replace(ExperimentConfig(), **PRESETS[preset])
    if path is not None:
        cfg = parse_overrides(Path(path).read_text(), cfg)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        cfg = replace(cfg, **overrides)
    if cfg.dataset == "mnist" and not cfg.mnist_dir and os.environ.get(DATA_DIR_ENV):
        cfg = replace(cfg, mnist_dir=os.environ[DATA_DIR_ENV])
    return cfg.validate()
