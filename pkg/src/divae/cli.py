"""Command line entry point: ``divae <command> [--config FILE] [--preset NAME] ...``.

Exit codes: 0 success, 1 other failure (for instance a missing upstream
stage), 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .config import PRESETS, ConfigError, load_config
from .errors import ContractViolation, FormatError, NumericFailure
from .metrics import MetricsReport

log = logging.getLogger("divae")

COMMANDS = ("gen-data", "estimate", "train", "eval", "ood", "report", "timing", "run")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="divae", description="Density-informed VAE experiments")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--preset", default="full", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int, action="append", help="restrict to this seed (repeatable)")
    p.add_argument("--out", help="run directory (overrides the config)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes for per-cell stages")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def _print_reports(reports: list[MetricsReport]) -> None:
    rows = [r.row() for r in reports]
    cols = [("prior", "prior"), ("method", "method"), ("seed", "seed")] + ex.SUMMARY
    print(ex.format_table(rows, cols))


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        if args.command == "report":
            out = args.out
            if out is None:
                out = load_config(args.config, args.preset).out
            for path in ex.report(out).values():
                print(path.with_suffix(".txt").read_text().rstrip())
            return 0
        cfg = load_config(args.config, args.preset, out=args.out)
        seeds = args.seed
        if args.command == "gen-data":
            for name, path in ex.gen_data(cfg).items():
                log.info("%s -> %s", name, path)
        elif args.command == "estimate":
            est = ex.estimate(cfg)
            log.info("teacher %s: mean rho %.4f over %d points", est.estimator, est.rho.mean(), est.n)
        elif args.command == "train":
            for path in ex.run_cells("train", cfg, seeds, args.jobs, log=log.info):
                log.info("checkpoint %s", path)
        elif args.command == "eval":
            _print_reports(ex.run_cells("eval", cfg, seeds, args.jobs))
        elif args.command == "ood":
            rows = ex.run_cells("ood", cfg, seeds, args.jobs)
            print(ex.format_table(rows, [("prior", "prior"), ("method", "method"), ("seed", "seed"),
                                         ("s_ood", "s"), ("d_elbo", "dELBO"), ("d_s", "ds"),
                                         ("d_kl", "dKL"), ("d_entropy", "dH")]))
        elif args.command == "timing":
            rows = ex.timing(cfg, seeds[0] if seeds else None)
            print(ex.format_table(rows, [(c, c) for c in ex.TIMING_COLUMNS]))
        elif args.command == "run":
            ex.run_all(cfg, seeds, args.jobs, log=log.info)
            print((Path(cfg.out) / "report.txt").read_text().rstrip())
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"numeric failure in {exc.op}: {exc}", file=sys.stderr)
        return 3
    except (ContractViolation, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
