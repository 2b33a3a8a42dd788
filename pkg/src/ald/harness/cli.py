"""Command-line entry point: ``ald <subcommand> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config

SUBCOMMANDS = {
    "sample-ld": "conjugate-ld",
    "sample-ald": "conjugate-ald",
    "ablate-capacity": "capacity-ablation",
    "neural-posterior": "neural-posterior",
    "train-lae": "train-lae",
    "train-ae": "train-ae",
    "train-vae": "train-vae",
    "train-hoffman": "train-hoffman",
    "eval-elbo": "eval-elbo",
}

HELP = {
    "sample-ld": "per-datapoint Langevin dynamics on the conjugate Gaussian toy",
    "sample-ald": "amortized Langevin dynamics on the conjugate Gaussian toy",
    "ablate-capacity": "ALD for several feature widths d against a fixed batch",
    "neural-posterior": "ALD versus Gaussian VI on a random neural-likelihood posterior",
    "train-lae": "train a Langevin autoencoder on MNIST-format images",
    "train-ae": "train the prior-regularized autoencoder baseline",
    "train-vae": "train the Gaussian VAE baseline",
    "train-hoffman": "train the encoder-initialized LD baseline",
    "eval-elbo": "held-out negative ELBO per dimension of a checkpoint",
    "selftest": "rerun the fixed-seed checks and compare with the reference CSVs",
    "make-dataset": "write MNIST-format IDX files synthesized from scikit-learn digits",
}


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ald", description="Amortized Langevin dynamics experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*SUBCOMMANDS, "selftest", "make-dataset"]:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", type=Path, help="experiment config file (INI key = value sections)")
        p.add_argument("--seed", type=_seed, help="override the configured seed")
        p.add_argument("--out", type=Path, help="output directory")
        if name == "selftest":
            p.add_argument("--update-reference", action="store_true",
                           help="rewrite the packaged reference CSVs instead of comparing")
        if name == "train-hoffman":
            p.add_argument("--ld-steps", type=int, help="override [trainer] ld_steps")
        if name == "make-dataset":
            p.add_argument("--n-train", type=int, default=4096)
            p.add_argument("--n-test", type=int, default=1024)
    return parser


def _experiment_config(args) -> ExperimentConfig:
    kind = SUBCOMMANDS[args.command]
    cfg = load_config(args.config, kind) if args.config else ExperimentConfig(kind)
    cfg.override(args.seed, args.out)
    if getattr(args, "ld_steps", None) is not None:
        cfg.sections.setdefault("trainer", {})["ld_steps"] = str(args.ld_steps)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selftest":
            from .selftest import run_selftest
            ok = run_selftest(args.out, update=args.update_reference)
            return 0 if ok else 1
        if args.command == "make-dataset":
            from .datasets import make_digit_idx
            paths = make_digit_idx(args.out or Path("data"), args.n_train, args.n_test, args.seed or 0)
            for p in paths.values():
                print(p)
            return 0
        from .experiments import run_experiment
        cfg = _experiment_config(args)
        result = run_experiment(cfg)
        for key in ("max_mean_err", "max_cov_frob_err", "final_neg_elbo_per_dim", "neg_elbo_per_dim",
                    "mean_hist_tv_ald", "mean_hist_tv_vi_diagonal"):
            if key in result:
                print(f"{key}: {result[key]}")
        for row in result.get("table", []):
            print(", ".join(f"{k}={v}" for k, v in row.items()))
        print(f"artifacts written to {cfg.out_dir}")
        return 0
    except Exception as exc:  # report every module error as one diagnostic line
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
