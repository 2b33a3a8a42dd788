"""End-to-end experiment drivers behind the command-line interface.

Every experiment derives its random streams from the configured seed
through :class:`numpy.random.SeedSequence`, so artifacts are reproducible
from ``(config, seed)``.  Outputs are plain CSV and text files; 2-D
experiments also write per-datapoint oracle densities for external plotting.
"""

from __future__ import annotations

import csv
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..autodiff import Tensor
from ..encoder import AmortizedEncoder, rank_diagnostic
from ..models import (TOY_SIGMA_X, DiscretizedLogisticLikelihood, GaussianPrior, LatentVariableModel,
                      NeuralGaussianLikelihood, conjugate_gaussian_model)
from ..samplers import SamplerConfig, merge_stores, run_ald, run_ld
from ..trainers import (GaussianVariationalEncoder, LAEConfig, estimate_elbo, train_hoffman, train_lae,
                        train_vae)
from .checkpoint import load_checkpoint, model_state, restore_state, save_checkpoint
from .config import ExperimentConfig, parse_ints, parse_matrix, parse_vector
from .datasets import load_flat_images, make_digit_idx
from .metrics import sample_metrics
from .oracles import ConjugateOracle, build_grid_oracle
from .vi import fit_gaussian_vi

COLLAPSE_RATIO = 0.5


def streams(seed: int, n: int = 4) -> list[np.random.Generator]:
    """Independent generators for data, initialization, chains and baselines."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def chain_seed(seed: int) -> int:
    return int(np.random.SeedSequence([seed, 1]).generate_state(1, dtype=np.uint64)[0])


def write_rows(path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r.values()])


def write_density(path, target) -> None:
    """Oracle histogram as ``x_center, y_center, mass`` rows."""
    mass, xe, ye = target.histogram()
    xc, yc = 0.5 * (xe[1:] + xe[:-1]), 0.5 * (ye[1:] + ye[:-1])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_center", "y_center", "mass"])
        for i, x in enumerate(xc):
            for j, y in enumerate(yc):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(mass[i, j]))])


def write_summary(path, summary: dict) -> None:
    with open(path, "w") as fh:
        for k, v in summary.items():
            fh.write(f"{k}: {v}\n")


# ------------------------------------------------------------ builders
def sampler_config(cfg: ExperimentConfig, **defaults) -> SamplerConfig:
    d = {"step_size": 4e-4, "total_steps": 3000, "burn_in": 1000, "mh_correction": True}
    d.update(defaults)
    return SamplerConfig(
        step_size=cfg.get("sampler", "step_size", d["step_size"], float),
        total_steps=cfg.get("sampler", "total_steps", d["total_steps"], int),
        burn_in=cfg.get("sampler", "burn_in", d["burn_in"], int),
        mh_correction=cfg.get("sampler", "mh_correction", d["mh_correction"], bool),
        inverse_temperature=cfg.get("sampler", "inverse_temperature", 1.0, float),
        rng_seed=chain_seed(cfg.seed),
    )


def conjugate_setup(cfg: ExperimentConfig):
    """Conjugate toy model and its observations (drawn from the model unless listed)."""
    mu_z = parse_vector(cfg.get("model", "mu_z", "0, 0"))
    sigma_z = parse_matrix(cfg.get("model", "sigma_z", "1, 0; 0, 1"))
    raw_sx = cfg.raw("model", "sigma_x")
    sigma_x = TOY_SIGMA_X if raw_sx is None else parse_matrix(raw_sx)
    model = conjugate_gaussian_model(mu_z, sigma_z, sigma_x)
    data_rng = streams(cfg.seed)[0]
    points = cfg.raw("data", "points")
    if points is not None:
        X = parse_matrix(points)
    else:
        n = cfg.get("sampler", "n", 3, int)
        z = model.prior.sample(data_rng, n)
        X = z + data_rng.standard_normal((n, len(mu_z))) @ np.linalg.cholesky(sigma_x).T
    return model, X


def toy_encoder(cfg: ExperimentConfig, obs_dim: int, latent_dim: int, d: int, rng) -> AmortizedEncoder:
    return AmortizedEncoder.mlp(
        obs_dim, latent_dim, rng, d=d,
        hidden=parse_ints(cfg.get("encoder", "hidden", "128")),
        layer_norm=cfg.get("encoder", "layer_norm", True, bool),
        output_gain=cfg.get("encoder", "output_gain", 1.0, float),
        phi_std=cfg.get("encoder", "phi_std", 0.01, float),
    )


def _store_rows(store, targets, extra: dict) -> list[dict]:
    rows = []
    for i, t in enumerate(targets):
        m = sample_metrics(store.usable(i), t)
        rows.append({**extra, "datapoint": i, **m, "det_ratio": m["sample_cov_det"] / m["target_cov_det"]})
    return rows


# ---------------------------------------------------------- experiments
def conjugate_ald(cfg: ExperimentConfig) -> dict:
    """ALD on the conjugate toy; metrics against the closed-form posteriors."""
    out = cfg.out_dir
    model, X = conjugate_setup(cfg)
    oracle = ConjugateOracle.from_model(model)
    d = cfg.get("encoder", "d", 128, int)
    enc = toy_encoder(cfg, X.shape[1], model.latent_dim, d, streams(cfg.seed)[1])
    store = run_ald(model, X, enc, sampler_config(cfg))
    targets = [oracle.target(x) for x in X]
    rows = _store_rows(store, targets, {"d": d})
    store.to_csv(out / "samples.csv")
    write_rows(out / "metrics.csv", rows)
    (out / "acceptance.txt").write_text(store.acceptance_report())
    for i, t in enumerate(targets):
        write_density(out / f"oracle_density_{i}.csv", t)
    summary = {
        "kind": cfg.kind, "seed": cfg.seed, "d": d, "n": len(X),
        "acceptance_rate": store.acceptance_rate,
        "max_mean_err": max(r["mean_err"] for r in rows),
        "max_cov_frob_err": max(r["cov_frob_err"] for r in rows),
    }
    write_summary(out / "summary.txt", summary)
    return {**summary, "rows": rows, "store": store, "X": X}


def conjugate_ld(cfg: ExperimentConfig) -> dict:
    """Per-datapoint LD on the conjugate toy, each chain started at the prior mean."""
    out = cfg.out_dir
    model, X = conjugate_setup(cfg)
    oracle = ConjugateOracle.from_model(model)
    base = sampler_config(cfg)
    stores = []
    for i, x in enumerate(X):
        seed_i = int(np.random.SeedSequence([cfg.seed, 3, i]).generate_state(1, dtype=np.uint64)[0])
        stores.append(run_ld(model, x, replace(base, rng_seed=seed_i), model.prior.mean))
    store = merge_stores(stores)
    targets = [oracle.target(x) for x in X]
    rows = _store_rows(store, targets, {"method": "ld"})
    store.to_csv(out / "samples.csv")
    write_rows(out / "metrics.csv", rows)
    for i, t in enumerate(targets):
        write_density(out / f"oracle_density_{i}.csv", t)
    summary = {"kind": cfg.kind, "seed": cfg.seed, "n": len(X),
               "acceptance_rates": [s.acceptance_rate for s in stores],
               "max_mean_err": max(r["mean_err"] for r in rows),
               "max_cov_frob_err": max(r["cov_frob_err"] for r in rows)}
    write_summary(out / "summary.txt", summary)
    return {**summary, "rows": rows, "store": store, "X": X}


def capacity_ablation(cfg: ExperimentConfig) -> dict:
    """ALD on one conjugate batch for several feature widths d."""
    out = cfg.out_dir
    model, X = conjugate_setup(cfg)
    oracle = ConjugateOracle.from_model(model)
    targets = [oracle.target(x) for x in X]
    dims = parse_ints(cfg.get("ablation", "dims", "2,3,128"))
    all_rows, table = [], []
    for d in dims:
        init = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, d]))
        enc = toy_encoder(cfg, X.shape[1], model.latent_dim, d, init)
        rank = rank_diagnostic(enc.features(X).data)
        # the comparison is about the stationary law, so chains run longer than the
        # conjugate-ald default (small d also shrinks the effective step size)
        store = run_ald(model, X, enc, sampler_config(cfg, total_steps=20000, burn_in=5000))
        rows = _store_rows(store, targets, {"d": d})
        all_rows.extend(rows)
        store.to_csv(out / f"samples_d{d}.csv")
        ratios = [r["det_ratio"] for r in rows]
        table.append({
            "d": d, "n": len(X), "feature_rank": rank.rank,
            "max_mean_err": max(r["mean_err"] for r in rows),
            "max_cov_frob_err": max(r["cov_frob_err"] for r in rows),
            "min_det_ratio": min(ratios),
            "collapsed_datapoints": sum(q < COLLAPSE_RATIO for q in ratios),
            "acceptance_rate": store.acceptance_rate,
        })
    write_rows(out / "metrics.csv", all_rows)
    write_rows(out / "capacity_table.csv", table)
    for i, t in enumerate(targets):
        write_density(out / f"oracle_density_{i}.csv", t)
    return {"kind": cfg.kind, "seed": cfg.seed, "table": table, "rows": all_rows}


def neural_setup(cfg: ExperimentConfig):
    rng_model, rng_data = streams(cfg.seed)[:2]
    lik = NeuralGaussianLikelihood.random(
        rng_model, hidden=parse_ints(cfg.get("model", "hidden", "128,128,128")),
        weight_std=cfg.get("model", "weight_std", 0.2, float),
        bias_std=cfg.get("model", "bias_std", 0.1, float),
        sigma=cfg.get("model", "sigma", 0.25, float))
    model = LatentVariableModel(GaussianPrior.standard(2), lik)
    n = cfg.get("sampler", "n", 3, int)
    z = rng_data.standard_normal((n, 2))
    X = lik.decoder(Tensor(z)).data + lik.sigma * rng_data.standard_normal((n, 2))
    return model, X


def neural_posterior(cfg: ExperimentConfig) -> dict:
    """ALD versus diagonal and full-covariance VI on the random-decoder posterior."""
    out = cfg.out_dir
    model, X = neural_setup(cfg)
    lo, hi = cfg.get("model", "grid_low", -4.0, float), cfg.get("model", "grid_high", 4.0, float)
    res = cfg.get("model", "grid_resolution", 200, int)
    targets = [build_grid_oracle(model, x, ((lo, hi), (lo, hi)), res) for x in X]
    _, _, rng_enc, rng_vi = streams(cfg.seed)
    d = cfg.get("encoder", "d", 128, int)
    enc = toy_encoder(cfg, 2, 2, d, rng_enc)
    store = run_ald(model, X, enc, sampler_config(cfg, step_size=1e-4, total_steps=20000, burn_in=4000))
    n_draws = store.n_steps - store.burn_in
    rows = _store_rows(store, targets, {"method": "ald"})
    fits = {}
    for family in ("diagonal", "full"):
        fit = fit_gaussian_vi(model, X, family, rng=rng_vi,
                              iterations=cfg.get("trainer", "vi_iterations", 1500, int),
                              lr=cfg.get("trainer", "vi_learning_rate", 0.02, float))
        draws = fit.sample(rng_vi, n_draws)
        fits[family] = draws
        for i, t in enumerate(targets):
            m = sample_metrics(draws[:, i], t)
            rows.append({"method": f"vi_{family}", "datapoint": i, **m,
                         "det_ratio": m["sample_cov_det"] / m["target_cov_det"]})
    write_rows(out / "metrics.csv", rows)
    store.to_csv(out / "samples_ald.csv")
    for family, draws in fits.items():
        with open(out / f"samples_vi_{family}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["draw", "datapoint_index", "z_0", "z_1"])
            for s in range(len(draws)):
                for i in range(draws.shape[1]):
                    w.writerow([s, i, repr(float(draws[s, i, 0])), repr(float(draws[s, i, 1]))])
    for i, t in enumerate(targets):
        write_density(out / f"oracle_density_{i}.csv", t)
    mean_tv = {m: float(np.mean([r["hist_tv"] for r in rows if r["method"] == m]))
               for m in ("ald", "vi_diagonal", "vi_full")}
    summary = {"kind": cfg.kind, "seed": cfg.seed, "acceptance_rate": store.acceptance_rate,
               **{f"mean_hist_tv_{k}": v for k, v in mean_tv.items()},
               "ald_beats_diagonal_vi": mean_tv["ald"] < mean_tv["vi_diagonal"]}
    write_summary(out / "summary.txt", summary)
    return {**summary, "rows": rows}


# ------------------------------------------------------------- training
def image_data(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Training and held-out images; synthesized into the output directory if not configured."""
    train_path, test_path = cfg.path("data", "train_images"), cfg.path("data", "test_images")
    if train_path is None:
        paths = make_digit_idx(cfg.out_dir / "data", seed=cfg.get("data", "dataset_seed", 0, int))
        train_path = paths["train-images"]
        test_path = test_path or paths["test-images"]
    train = load_flat_images(train_path, cfg.get("data", "n_train", 4096, int))
    test = (load_flat_images(test_path, cfg.get("data", "n_test", 1024, int))
            if test_path is not None else None)
    return train, test


def lae_config(cfg: ExperimentConfig) -> LAEConfig:
    lr = cfg.get("trainer", "learning_rate", 1e-4, float)
    return LAEConfig(
        ald_steps=cfg.get("trainer", "ald_steps", 2, int),
        learning_rate=lr,
        encoder_learning_rate=cfg.get("trainer", "encoder_learning_rate", lr, float),
        batch_size=cfg.get("trainer", "batch_size", 100, int),
        step_size=cfg.get("trainer", "step_size", 1e-4, float),
        epochs=cfg.get("trainer", "epochs", 10, int),
        seed=cfg.seed,
        estimator=cfg.get("trainer", "estimator", "time_averaged"),
        mh_correction=cfg.get("trainer", "mh_correction", True, bool),
        optimizer=cfg.get("trainer", "optimizer", "sgd"),
        eval_sigma=cfg.get("trainer", "eval_sigma", 0.05, float),
        eval_samples=cfg.get("trainer", "eval_samples", 16, int),
    )


def build_image_model(cfg: ExperimentConfig, m: int, obs_dim: int = 784):
    """Decoder model plus both encoder flavours, initialized from the seed's streams."""
    _, rng_model, rng_enc, _ = streams(cfg.seed)
    dz = cfg.get("model", "latent_dim", 8, int)
    lik = DiscretizedLogisticLikelihood.build(
        rng_model, dz, obs_dim, m, hidden=parse_ints(cfg.get("model", "decoder_hidden", "256,256,256")),
        b_init=cfg.get("model", "b_init", 0.0, float))
    model = LatentVariableModel(GaussianPrior.standard(dz), lik)
    d = cfg.get("encoder", "d", 256, int)
    gain = cfg.get("encoder", "output_gain", 0.1, float)
    hidden = parse_ints(cfg.get("encoder", "hidden", "256"))
    if cfg.kind in ("train-lae", "train-ae"):
        flavour = "amortized"
    elif cfg.kind in ("train-vae", "train-hoffman"):
        flavour = "gaussian"
    else:
        flavour = cfg.get("trainer", "encoder", "amortized")
    if flavour == "amortized":
        phi_std = cfg.get("encoder", "phi_std", 1.0 / (gain * math.sqrt(d)), float)
        enc = AmortizedEncoder.mlp(obs_dim, dz, rng_enc, d=d, hidden=hidden, output_gain=gain, phi_std=phi_std)
    else:
        venc_hidden = parse_ints(cfg.get("encoder", "vae_hidden", ",".join(map(str, (*hidden, d)))))
        enc = GaussianVariationalEncoder.mlp(obs_dim, dz, rng_enc, hidden=venc_hidden)
    return model, enc


def train_image(cfg: ExperimentConfig, progress=print) -> dict:
    out = cfg.out_dir
    train, test = image_data(cfg)
    tcfg = lae_config(cfg)
    model, enc = build_image_model(cfg, len(train), train.shape[1])
    if cfg.kind == "train-lae":
        report = train_lae(model, enc, train, tcfg, test, progress)
    elif cfg.kind == "train-ae":
        report = train_lae(model, enc, train, replace(tcfg, ald_steps=0), test, progress)
    elif cfg.kind == "train-vae":
        report = train_vae(model, enc, train, tcfg, test, progress)
    else:
        report = train_hoffman(model, enc, train, tcfg, cfg.get("trainer", "ld_steps", 2, int), test, progress)
    report.to_csv(out / "train_report.csv")
    with open(out / "batch_losses.csv", "w") as fh:
        fh.write("batch,loss\n")
        for i, v in enumerate(report.batch_losses):
            fh.write(f"{i},{v!r}\n")
    save_checkpoint(out / "checkpoint.bin", model_state(model, enc))
    neg = report.column("neg_elbo_per_dim")
    summary = {"kind": cfg.kind, "seed": cfg.seed, "epochs": len(report.rows),
               "final_neg_elbo_per_dim": float(neg[-1]) if len(neg) else float("nan"),
               "scale": model.likelihood.scale}
    write_summary(out / "summary.txt", summary)
    return {**summary, "report": report, "model": model, "encoder": enc}


def eval_elbo(cfg: ExperimentConfig, progress=print) -> dict:
    """Held-out negative ELBO per dimension of a saved checkpoint."""
    ckpt = cfg.path("trainer", "checkpoint")
    if ckpt is None:
        raise FileNotFoundError("eval-elbo needs [trainer] checkpoint = <path>")
    state = load_checkpoint(ckpt)
    amortized = "encoder.phi" in state
    cfg.sections.setdefault("trainer", {})["encoder"] = "amortized" if amortized else "gaussian"
    _, test = image_data(cfg)
    if test is None:
        raise FileNotFoundError("eval-elbo needs [data] test_images")
    model, enc = build_image_model(cfg, cfg.get("data", "n_train", 4096, int), test.shape[1])
    restore_state(state, model, enc)
    sigma = cfg.get("trainer", "eval_sigma", 0.05, float)
    K = cfg.get("trainer", "eval_samples", 16, int)
    est = estimate_elbo(model, enc, test, sigma, K, rng=streams(cfg.seed)[3])
    summary = {"kind": cfg.kind, "seed": cfg.seed, "encoder": "amortized" if amortized else "gaussian",
               "sigma": sigma, "K": K, "neg_elbo_per_dim": est.value, "stderr": est.stderr,
               "skipped_terms": est.skipped}
    write_summary(cfg.out_dir / "elbo.txt", summary)
    if progress is not None:
        progress(f"neg_elbo_per_dim = {est.value:.6f} (sigma={sigma:g}, K={K}, se={est.stderr:.2g})")
    return summary


RUNNERS = {
    "conjugate-ld": conjugate_ld,
    "conjugate-ald": conjugate_ald,
    "capacity-ablation": capacity_ablation,
    "neural-posterior": neural_posterior,
    "train-lae": train_image,
    "train-ae": train_image,
    "train-vae": train_image,
    "train-hoffman": train_image,
    "eval-elbo": eval_elbo,
}


def run_experiment(cfg: ExperimentConfig, **kwargs) -> dict:
    """Run the configured experiment and write its artifacts under ``cfg.out_dir``."""
    cfg.check_files()
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    return RUNNERS[cfg.kind](cfg, **kwargs)
