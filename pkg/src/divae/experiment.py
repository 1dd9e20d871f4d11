"""Pipeline stages behind the command line: data, teacher, training, evaluation, OOD, report, timing.

Run directory layout::

    out/config.txt
    out/data/{train,val,ood}.divd          synthetic splits
    out/teacher.divr                       training-set density teacher (with PCA projector)
    out/reference.divr, out/ood_reference.divr
                                           per-point reference log-densities of the evaluation splits
    out/cells/{prior}-{method}-seed{s}/    model.divm, epochs.csv, metrics.csv, latents.csv,
                                           ood.csv, manifest.json
    out/report.csv, out/report.txt, out/ood_report.csv, out/timing.csv
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .aligners import AlignConfig
from .config import ExperimentConfig, from_text
from .density import DensityEstimate, estimate_teacher, knn_logdensity_adaptive
from .errors import ContractViolation
from .evaluate import evaluate
from .io import (
    RunManifest,
    atomic_write,
    file_sha256,
    git_describe,
    load_checkpoint,
    load_dataset,
    load_density,
    load_mnist_split,
    save_checkpoint,
    save_dataset,
    save_density,
)
from .metrics import MetricsReport, ood_shifts
from .synthgen import SyntheticDataset, ancestor_logpdf, build_dataset, default_spec
from .training import EPOCH_COLUMNS, Trainer, TrainConfig, model_from_checkpoint
from .vae import VaeConfig, make_vae

OOD_COLUMNS = ["prior", "method", "seed", "elbo_in", "elbo_ood", "s_in", "s_ood", "kl_in", "kl_ood",
               "entropy_in", "entropy_ood", "d_elbo", "d_s", "d_kl", "d_entropy", "ks_ood",
               "kl_q_p2_ood", "config_hash"]
TIMING_COLUMNS = ["prior", "method", "t_init", "t_batch", "t_epoch", "ratio_vs_none"]
# columns of the pretty summary table
SUMMARY = [("elbo_mean", "ELBO"), ("s_mean", "s"), ("ref_mean", "ref"), ("ks", "KS"),
           ("wasserstein", "W"), ("coverage_kl", "KL(p2||pZ)"), ("kl_q_p2", "KL(q||p2)"),
           ("kl_q_prior", "KL(q||pZ)"), ("entropy", "H")]


class MissingStage(ContractViolation):
    def __init__(self, path, stage: str):
        self.stage = stage
        super().__init__(f"missing {path}; run the '{stage}' stage first")


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingStage(path, stage)
    return path


def _fmt(v) -> str:
    # repr of a Python float is the shortest exact round trip, hence byte-stable
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns: list[str], rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    atomic_write(path, buf.getvalue().encode())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def format_table(rows: list[dict], columns: list[tuple[str, str]]) -> str:
    cells = [[label for _, label in columns]]
    for r in rows:
        line = []
        for key, _ in columns:
            v = r[key]
            line.append(f"{v:.4g}" if isinstance(v, float) else str(v))
        cells.append(line)
    widths = [max(len(c[i]) for c in cells) for i in range(len(columns))]
    out = []
    for j, line in enumerate(cells):
        out.append("  ".join(c.rjust(w) for c, w in zip(line, widths)))
        if j == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out)


class Paths:
    def __init__(self, out):
        self.root = Path(out)
        self.data = self.root / "data"
        self.cells = self.root / "cells"
        self.teacher = self.root / "teacher.divr"
        self.reference = self.root / "reference.divr"
        self.ood_reference = self.root / "ood_reference.divr"

    def split(self, name: str) -> Path:
        return self.data / f"{name}.divd"

    def cell(self, prior: str, method: str, seed: int) -> Path:
        return self.cells / f"{prior}-{method}-seed{seed}"


def cells_of(cfg: ExperimentConfig, seeds=None) -> list[tuple[str, str, int]]:
    seeds = cfg.seeds if seeds is None else seeds
    return [(p, m, s) for p in cfg.priors for m in cfg.methods for s in seeds]


# ------------------------------------------------------------------ data


def gen_data(cfg: ExperimentConfig) -> dict[str, Path]:
    """Write the synthetic splits (k-component training data and the OOD set)."""
    paths = Paths(cfg.out)
    paths.data.mkdir(parents=True, exist_ok=True)
    atomic_write(paths.root / "config.txt", cfg.to_text().encode())
    if not cfg.is_synthetic:
        # real data is read straight from the IDX directory; check that it is there
        load_mnist_split(cfg.mnist_dir, "train")
        return {}
    train, val = build_dataset(default_spec(cfg.k), cfg.dim, cfg.sigma_pad, cfg.n_train, cfg.n_val,
                               seed=cfg.data_seed)
    _, ood = build_dataset(default_spec(cfg.ood_k), cfg.dim, cfg.sigma_pad, 1, cfg.n_val,
                           seed=cfg.ood_data_seed)
    ood.split = "ood"
    out = {}
    for name, ds in (("train", train), ("val", val), ("ood", ood)):
        save_dataset(paths.split(name), ds)
        out[name] = paths.split(name)
    return out


def load_split(cfg: ExperimentConfig, name: str) -> tuple[np.ndarray, np.ndarray, SyntheticDataset | None]:
    """(X, labels, dataset-or-None) for split ``train``, ``val`` or ``ood``."""
    paths = Paths(cfg.out)
    if cfg.is_synthetic:
        ds = load_dataset(_need(paths.split(name), "gen-data"))
        return ds.X, ds.labels, ds
    if name == "ood":
        if not cfg.ood_mnist_dir:
            raise ContractViolation("ood_mnist_dir is required for OOD evaluation on real data")
        X, y = load_mnist_split(cfg.ood_mnist_dir, "test")
        n = cfg.n_val
    else:
        X, y = load_mnist_split(cfg.mnist_dir, "train" if name == "train" else "test")
        n = cfg.n_train if name == "train" else cfg.n_val
    return X[:n], y[:n], None


def _dataset_hashes(cfg: ExperimentConfig) -> dict[str, str]:
    paths = Paths(cfg.out)
    if not cfg.is_synthetic:
        return {}
    return {n: file_sha256(paths.split(n)) for n in ("train", "val", "ood") if paths.split(n).exists()}


# ------------------------------------------------------------------ teacher


def _reference(cfg: ExperimentConfig, X: np.ndarray, ds, teacher: DensityEstimate) -> DensityEstimate:
    if ds is not None:
        rho = ancestor_logpdf(X, ds)
        return DensityEstimate(rho, np.ones_like(rho), "oracle")
    index = "kdtree" if len(X) > 20_000 else "brute"
    k_max = min(cfg.knn_k_max, len(X) - 1)
    return knn_logdensity_adaptive(teacher.projector.transform(X), k_max=k_max, index=index)


def estimate(cfg: ExperimentConfig, with_ood: bool = True) -> DensityEstimate:
    """Fit the training-set teacher and the reference densities of the evaluation splits."""
    paths = Paths(cfg.out)
    X, _, ds = load_split(cfg, "train")
    index = "kdtree" if len(X) > 20_000 else "brute"
    teacher = estimate_teacher(X, cfg.teacher, cfg.d, dataset=ds, k_max=cfg.knn_k_max,
                               bandwidth=cfg.kde_bandwidth or None, index=index)
    if teacher.projector is None:
        raise ContractViolation("teacher lost its projector")
    save_density(paths.teacher, teacher)
    Xv, _, dsv = load_split(cfg, "val")
    save_density(paths.reference, _reference(cfg, Xv, dsv, teacher))
    if with_ood and (cfg.is_synthetic or cfg.ood_mnist_dir):
        Xo, _, dso = load_split(cfg, "ood")
        save_density(paths.ood_reference, _reference(cfg, Xo, dso, teacher))
    return teacher


# ------------------------------------------------------------------ training


def vae_config(cfg: ExperimentConfig, prior: str) -> VaeConfig:
    return VaeConfig(
        input_dim=cfg.dim if cfg.is_synthetic else 784,
        latent_dim=cfg.d,
        hidden=cfg.hidden_units,
        likelihood=cfg.likelihood,
        sigma_x=cfg.sigma_x,
        prior=prior,
        prior_components=cfg.n_components,
        hidden_activation=cfg.hidden_activation,
    )


def make_trainer(cfg: ExperimentConfig, prior: str, method: str, seed: int, X=None, teacher=None) -> Trainer:
    paths = Paths(cfg.out)
    if X is None:
        X = load_split(cfg, "train")[0]
    if teacher is None:
        teacher = load_density(_need(paths.teacher, "estimate"))
    model = make_vae(vae_config(cfg, prior), seed=seed, data=X)
    align = AlignConfig(method, delta=cfg.huber_delta, detach_encoder=cfg.detach_encoder)
    train = TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, epochs=cfg.epochs, seed=seed,
                        flow_layers=cfg.flow_layers, flow_hidden=cfg.flow_hidden, flow_bound=cfg.flow_bound)
    return Trainer(model, X, align, train, teacher)


def _manifest(cfg: ExperimentConfig, prior: str, method: str, seed: int, timings: dict) -> RunManifest:
    paths = Paths(cfg.out)
    snapshot = asdict(cfg)
    snapshot.update(priors=[prior], methods=[method], seeds=[seed])
    return RunManifest(snapshot, [seed], _dataset_hashes(cfg), file_sha256(paths.teacher), git_describe(), timings)


def train_cell(cfg: ExperimentConfig, prior: str, method: str, seed: int, log=None) -> Path:
    """Train one (prior, method, seed) cell, resuming from its checkpoint when present."""
    paths = Paths(cfg.out)
    cell = paths.cell(prior, method, seed)
    cell.mkdir(parents=True, exist_ok=True)
    ckpt = cell / "model.divm"
    t0 = time.perf_counter()
    trainer = make_trainer(cfg, prior, method, seed)
    t_init = time.perf_counter() - t0
    rows = []
    if ckpt.exists():
        meta, tensors = load_checkpoint(ckpt)
        if meta.get("config_hash") == cfg.cell_hash(prior, method, seed):
            trainer.load_state(meta, tensors)
            if (cell / "epochs.csv").exists():
                rows = [r for r in read_csv(cell / "epochs.csv") if int(r["epoch"]) < trainer.epoch]
    # a checkpoint is written at every epoch boundary
    while not trainer.done:
        row = trainer.run_epoch()
        rows.append(row)
        meta, tensors = trainer.state()
        meta["config_hash"] = cfg.cell_hash(prior, method, seed)
        save_checkpoint(ckpt, meta, tensors)
        write_csv(cell / "epochs.csv", EPOCH_COLUMNS, rows)
        if log is not None:
            log(f"{cell.name} epoch {row['epoch']}: elbo={row['elbo']:.3f} align={row['align_loss']:.3f}")
    timings = {"t_init": t_init, "t_train": time.perf_counter() - t0}
    _manifest(cfg, prior, method, seed, timings).save(cell / "manifest.json")
    return ckpt


# ------------------------------------------------------------------ evaluation


def _load_cell(cfg: ExperimentConfig, prior: str, method: str, seed: int):
    cell = Paths(cfg.out).cell(prior, method, seed)
    ckpt = _need(cell / "model.divm", "train")
    model, _, meta = model_from_checkpoint(ckpt)
    if meta["epoch"] < meta["train"]["epochs"]:
        raise MissingStage(ckpt, "train")
    return cell, model


def eval_cell(cfg: ExperimentConfig, prior: str, method: str, seed: int) -> MetricsReport:
    paths = Paths(cfg.out)
    cell, model = _load_cell(cfg, prior, method, seed)
    X, labels, ds = load_split(cfg, "val")
    ref = load_density(_need(paths.reference, "estimate")).rho
    rep, lat = evaluate(model, X, ref, spec=ds.spec if ds is not None else None, eval_seed=cfg.eval_seed,
                        kl_mc=cfg.kl_mc, posterior_kl_mc=cfg.posterior_kl_mc, prior=prior, method=method,
                        seed=seed, config_hash=cfg.cell_hash(prior, method, seed))
    write_csv(cell / "metrics.csv", MetricsReport.columns(), [rep.row()])
    d = lat["z"].shape[1]
    cols = ["index", "label"] + [f"z{j}" for j in range(d)] + [f"mu{j}" for j in range(d)] + ["s", "rho"]
    rows = []
    for i in range(len(X)):
        r = {"index": i, "label": int(labels[i]), "s": lat["s"][i], "rho": lat["reference"][i]}
        for j in range(d):
            r[f"z{j}"] = lat["z"][i, j]
            r[f"mu{j}"] = lat["mu"][i, j]
        rows.append(r)
    write_csv(cell / "latents.csv", cols, rows)
    return rep


def ood_cell(cfg: ExperimentConfig, prior: str, method: str, seed: int) -> dict:
    paths = Paths(cfg.out)
    cell, model = _load_cell(cfg, prior, method, seed)
    h = cfg.cell_hash(prior, method, seed)
    common = dict(eval_seed=cfg.eval_seed, kl_mc=cfg.kl_mc, posterior_kl_mc=cfg.posterior_kl_mc,
                  prior=prior, method=method, seed=seed, config_hash=h)
    Xv, _, dsv = load_split(cfg, "val")
    Xo, _, dso = load_split(cfg, "ood")
    ref_in = load_density(_need(paths.reference, "estimate")).rho
    ref_ood = load_density(_need(paths.ood_reference, "estimate")).rho
    rep_in, _ = evaluate(model, Xv, ref_in, spec=dsv.spec if dsv is not None else None, **common)
    # KL(q || p2) on OOD points is measured against the density they were drawn from
    rep_ood, _ = evaluate(model, Xo, ref_ood, spec=dso.spec if dso is not None else None, **common)
    sh = ood_shifts(rep_in, rep_ood)
    row = {
        "prior": prior, "method": method, "seed": seed,
        "elbo_in": rep_in.elbo_mean, "elbo_ood": rep_ood.elbo_mean,
        "s_in": rep_in.s_mean, "s_ood": rep_ood.s_mean,
        "kl_in": rep_in.kl_q_prior, "kl_ood": rep_ood.kl_q_prior,
        "entropy_in": rep_in.entropy, "entropy_ood": rep_ood.entropy,
        "d_elbo": sh.d_elbo, "d_s": sh.d_s, "d_kl": sh.d_kl, "d_entropy": sh.d_entropy,
        "ks_ood": rep_ood.ks, "kl_q_p2_ood": rep_ood.kl_q_p2, "config_hash": h,
    }
    write_csv(cell / "ood.csv", OOD_COLUMNS, [row])
    return row


# ------------------------------------------------------------------ fan-out


def _worker(stage: str, cfg_text: str, prior: str, method: str, seed: int):
    cfg = from_text(cfg_text)
    return STAGES[stage](cfg, prior, method, seed)


STAGES = {"train": train_cell, "eval": eval_cell, "ood": ood_cell}


def run_cells(stage: str, cfg: ExperimentConfig, seeds=None, jobs: int = 1, log=None) -> list:
    todo = cells_of(cfg, seeds)
    if jobs <= 1:
        out = []
        for prior, method, seed in todo:
            if stage == "train":
                out.append(train_cell(cfg, prior, method, seed, log=log))
            else:
                out.append(STAGES[stage](cfg, prior, method, seed))
        return out
    text = cfg.to_text()
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_worker, stage, text, *c) for c in todo]
        return [f.result() for f in futures]


# ------------------------------------------------------------------ report


def _aggregate(rows: list[dict], keys: list[str]) -> tuple[dict, dict]:
    mean, std = {}, {}
    for k in keys:
        vals = np.array([float(r[k]) for r in rows])
        mean[k] = math.fsum(vals) / len(vals)
        std[k] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return mean, std


def _report_table(rows: list[dict], numeric: list[str]) -> tuple[list[dict], list[dict]]:
    """Per-seed rows followed by one mean+-std row per (prior, method)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["prior"], r["method"]), []).append(r)
    out, summary = [], []
    for (prior, method), grp in groups.items():
        grp.sort(key=lambda r: int(r["seed"]))
        out.extend(grp)
        mean, std = _aggregate(grp, numeric)
        agg = {c: "" for c in grp[0]}
        agg.update(prior=prior, method=method, seed="mean")
        for k in numeric:
            agg[k] = f"{mean[k]!r}+-{std[k]!r}"
        out.append(agg)
        summary.append({"prior": prior, "method": method, "n": len(grp), **mean})
    return out, summary


def report(out_dir) -> dict[str, Path]:
    """Aggregate the per-cell metrics (and OOD rows, if any) of a run directory."""
    paths = Paths(out_dir)
    metric_files = sorted(paths.cells.glob("*/metrics.csv")) if paths.cells.exists() else []
    if not metric_files:
        raise MissingStage(paths.cells / "*/metrics.csv", "eval")
    written = {}
    rows = [r for f in metric_files for r in read_csv(f)]
    cols = MetricsReport.columns()
    numeric = [c for c in cols if c not in ("prior", "method", "seed", "n_eval", "kl_mc",
                                            "posterior_kl_mc", "config_hash")]
    table, summary = _report_table(rows, numeric)
    _write_raw_csv(paths.root / "report.csv", cols, table)
    text = format_table(summary, [("prior", "prior"), ("method", "method"), ("n", "seeds")] + SUMMARY)
    atomic_write(paths.root / "report.txt", (text + "\n").encode())
    written["report"] = paths.root / "report.csv"
    ood_files = sorted(paths.cells.glob("*/ood.csv"))
    if ood_files:
        rows = [r for f in ood_files for r in read_csv(f)]
        numeric = [c for c in OOD_COLUMNS if c not in ("prior", "method", "seed", "config_hash")]
        table, summary = _report_table(rows, numeric)
        _write_raw_csv(paths.root / "ood_report.csv", OOD_COLUMNS, table)
        text = format_table(summary, [("prior", "prior"), ("method", "method"), ("s_ood", "s"),
                                      ("kl_q_p2_ood", "KL(q||p2)"), ("d_elbo", "dELBO"), ("d_s", "ds"),
                                      ("d_kl", "dKL"), ("d_entropy", "dH"), ("entropy_ood", "H")])
        atomic_write(paths.root / "ood_report.txt", (text + "\n").encode())
        written["ood"] = paths.root / "ood_report.csv"
    return written


def _write_raw_csv(path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([r.get(c, "") for c in columns])
    atomic_write(path, buf.getvalue().encode())


# ------------------------------------------------------------------ timing


def timing(cfg: ExperimentConfig, seed: int | None = None) -> list[dict]:
    """Initialisation, per-batch and per-epoch wall-clock for every (prior, method)."""
    paths = Paths(cfg.out)
    seed = cfg.seeds[0] if seed is None else seed
    X = load_split(cfg, "train")[0]
    teacher = load_density(_need(paths.teacher, "estimate"))
    rows = []
    for prior in cfg.priors:
        base = None
        for method in cfg.methods:
            t0 = time.perf_counter()
            tr = make_trainer(cfg, prior, method, seed, X=X, teacher=teacher)
            t_init = time.perf_counter() - t0
            epochs = [tr.run_epoch() for _ in range(min(cfg.timing_epochs, cfg.epochs))]
            row = {"prior": prior, "method": method, "t_init": t_init,
                   "t_batch": float(np.mean([e["t_batch"] for e in epochs])),
                   "t_epoch": float(np.mean([e["t_epoch"] for e in epochs]))}
            if method == "none":
                base = row["t_epoch"]
            row["ratio_vs_none"] = row["t_epoch"] / base if base else float("nan")
            rows.append(row)
    paths.root.mkdir(parents=True, exist_ok=True)
    write_csv(paths.root / "timing.csv", TIMING_COLUMNS, rows)
    return rows


def run_all(cfg: ExperimentConfig, seeds=None, jobs: int = 1, log=None) -> dict[str, Path]:
    gen_data(cfg)
    estimate(cfg)
    run_cells("train", cfg, seeds, jobs, log)
    run_cells("eval", cfg, seeds, jobs)
    if cfg.is_synthetic or cfg.ood_mnist_dir:
        run_cells("ood", cfg, seeds, jobs)
    return report(cfg.out)
