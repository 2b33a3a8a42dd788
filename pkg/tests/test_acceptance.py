"""End-to-end acceptance checks.

Each test prints exactly one ``PASS`` or ``FAIL`` line naming the criterion,
the measured quantities and the pinned tolerance; the lines are repeated in
the terminal summary.  The thresholds below are fixed here and nowhere else.
"""

import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import VERDICTS

from ald.harness.config import ExperimentConfig, default_config
from ald.harness.datasets import make_digit_idx
from ald.gradcheck import check_gradients
from ald.harness.experiments import build_image_model, image_data, lae_config, run_experiment
from ald.harness.selftest import CHECKS, gradient_cases, logistic_sums, onehot_trajectories, run_selftest
from ald.samplers import SamplerConfig, run_chain
from ald.trainers import train_hoffman, train_vae

# ---------------------------------------------------------------- tolerances
C1_MEAN_TOL, C1_COV_TOL, C1_SECONDS = 0.1, 0.15, 60.0
C2_COLLAPSE = 0.5
C3_MAX_DEV, C3_STEPS = 1e-10, 1000
C4_TV, C4_SAMPLES, C4_BURN_IN, C4_STEP = 0.05, 200_000, 5_000, 0.05
C5_REL_ERR, C5_MAX_PARAMS = 1e-4, 100
C6_SUM_TOL, C6_PAIRS = 1e-9, 100
C7_SEEDS, C7_NEEDED = (0, 1, 2), 2
C8_SEEDS, C8_EPOCHS, C8_SECONDS = (0, 1, 2), 10, 30 * 60.0
C8_SMOKE_DROP = 0.05
C9_STEPS, C9_RTOL = (0, 2, 10), 1e-8


def verdict(criterion: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    print(line)
    VERDICTS.append(line)


# --------------------------------------------------------------- criterion 1
def test_criterion_1_conjugate_posterior(tmp_path):
    cfg = default_config("conjugate-ald", 0, tmp_path)  # n=3, d=128, eta=4e-4, 3000 steps, 1000 burn-in
    with threadpool_limits(1):
        start = time.perf_counter()
        res = run_experiment(cfg)
        seconds = time.perf_counter() - start
    ok = res["max_mean_err"] < C1_MEAN_TOL and res["max_cov_frob_err"] < C1_COV_TOL and seconds < C1_SECONDS
    verdict("1 (conjugate posterior)", ok,
            f"max mean err {res['max_mean_err']:.4f} (< {C1_MEAN_TOL}), max cov Frobenius err "
            f"{res['max_cov_frob_err']:.4f} (< {C1_COV_TOL}), {seconds:.1f} s (< {C1_SECONDS:.0f} s)")
    assert ok


# --------------------------------------------------------------- criterion 2
@pytest.mark.slow
@pytest.mark.filterwarnings("ignore:encoder feature dimension")  # d=2 < n=3 is the point
def test_criterion_2_capacity_ablation(tmp_path):
    res = run_experiment(default_config("capacity-ablation", 0, tmp_path))
    table = {row["d"]: row for row in res["table"]}
    ok = (len(res["table"]) == 3 and (tmp_path / "capacity_table.csv").exists()
          and table[2]["collapsed_datapoints"] >= 1 and table[128]["collapsed_datapoints"] == 0)
    verdict("2 (capacity ablation)", ok,
            f"d=2 min det ratio {table[2]['min_det_ratio']:.3f} with {table[2]['collapsed_datapoints']} collapsed, "
            f"d=128 min det ratio {table[128]['min_det_ratio']:.3f} with {table[128]['collapsed_datapoints']} "
            f"collapsed (collapse means < {C2_COLLAPSE}x truth), {len(res['table'])} table rows")
    assert ok


# --------------------------------------------------------------- criterion 3
def test_criterion_3_onehot_equivalence():
    ald_traj, ld_traj = onehot_trajectories(steps=C3_STEPS)
    dev = float(np.max(np.abs(ald_traj - ld_traj)))
    ok = ald_traj.shape[0] >= C3_STEPS and dev < C3_MAX_DEV
    verdict("3 (one-hot equivalence)", ok, f"max abs deviation {dev:.3g} over {C3_STEPS} steps (< {C3_MAX_DEV})")
    assert ok


# --------------------------------------------------------------- criterion 4
def double_well(z):
    x = z[0]
    return 2.0 * (x * x - 1.0) ** 2, np.array([8.0 * x * (x * x - 1.0)])


def test_criterion_4_mh_double_well():
    cfg = SamplerConfig(C4_STEP, C4_SAMPLES + C4_BURN_IN, C4_BURN_IN, rng_seed=11)
    store = run_chain(double_well, np.array([0.0]), cfg, lambda z: z.reshape(1, -1))
    draws = store.usable(0)[:, 0]
    # quadrature: 200 midpoints per histogram bin, normalized over the plotted range
    edges = np.linspace(-2.5, 2.5, 51)
    fine = np.linspace(-2.5, 2.5, 50 * 200 + 1)
    mids = 0.5 * (fine[1:] + fine[:-1])
    w = np.exp(-2.0 * (mids ** 2 - 1.0) ** 2)
    target = w.reshape(50, 200).sum(axis=1) / w.sum()
    inside = (draws >= edges[0]) & (draws <= edges[-1])
    hist = np.histogram(draws, edges)[0] / len(draws)
    tv = 0.5 * (np.abs(hist - target).sum() + np.mean(~inside))
    rejected = np.flatnonzero(~store.accepted[1:]) + 1
    frozen = all(store.samples[t].tobytes() == store.samples[t - 1].tobytes() for t in rejected)
    ok = len(draws) >= C4_SAMPLES and tv < C4_TV and frozen and len(rejected) > 0
    verdict("4 (MH correctness)", ok,
            f"TV {tv:.4f} (< {C4_TV}) from {len(draws)} samples, {len(rejected)} rejected steps "
            f"{'all' if frozen else 'NOT all'} bitwise unchanged")
    assert ok


# --------------------------------------------------------------- criterion 5
def test_criterion_5_gradients():
    worst, names, sizes = 0.0, [], []
    for name, fn, params in gradient_cases(0):
        sizes.append(sum(p.size for p in params))
        err = check_gradients(fn, params)
        worst = max(worst, err)
        names.append(name)
    ok = worst < C5_REL_ERR and max(sizes) <= C5_MAX_PARAMS
    verdict("5 (gradient integrity)", ok,
            f"worst relative error {worst:.3g} (< {C5_REL_ERR}) over {len(names)} cases, "
            f"largest case {max(sizes)} parameters (<= {C5_MAX_PARAMS})")
    assert ok


# --------------------------------------------------------------- criterion 6
def test_criterion_6_logistic_normalization():
    sums = logistic_sums(0, pairs=C6_PAIRS)[:, 2]  # columns: mu, b, total probability
    dev = float(np.max(np.abs(sums - 1.0)))
    ok = sums.size >= C6_PAIRS and dev < C6_SUM_TOL
    verdict("6 (logistic normalization)", ok, f"max |sum - 1| {dev:.3g} over {sums.size} pairs (< {C6_SUM_TOL})")
    assert ok


# --------------------------------------------------------------- criterion 7
@pytest.mark.slow
def test_criterion_7_neural_posterior(tmp_path):
    parts, wins = [], 0
    for seed in C7_SEEDS:
        s = run_experiment(default_config("neural-posterior", seed, tmp_path / str(seed)))
        wins += bool(s["ald_beats_diagonal_vi"])
        parts.append(f"seed {seed}: ALD {s['mean_hist_tv_ald']:.3f} vs diagonal VI {s['mean_hist_tv_vi_diagonal']:.3f}")
    ok = wins >= C7_NEEDED
    verdict("7 (neural posterior)", ok, f"ALD has lower TV in {wins}/{len(C7_SEEDS)} seeds "
                                        f"(needs >= {C7_NEEDED}); " + "; ".join(parts))
    assert ok


# --------------------------------------------------------------- criterion 8
def image_cfg(kind, seed, out, data):
    """Desk-scale image configuration: 4096/1024 images, d_z=8, T=2, 10 epochs, Adam 1e-3."""
    return ExperimentConfig(kind, seed, out, {
        "data": {"train_images": str(data["train-images"]), "test_images": str(data["test-images"]),
                 "n_train": "4096", "n_test": "1024"},
        "model": {"latent_dim": "8"},
        "trainer": {"ald_steps": "2", "epochs": str(C8_EPOCHS), "optimizer": "adam", "learning_rate": "1e-3",
                    "eval_sigma": "0.05", "eval_samples": "16"},
    })


@pytest.fixture(scope="module")
def digit_files(tmp_path_factory):
    return make_digit_idx(tmp_path_factory.mktemp("digits"), 4096, 1024, seed=0)


@pytest.fixture(scope="module")
def image_runs(tmp_path_factory, digit_files):
    out = tmp_path_factory.mktemp("image")
    curves = {}
    with threadpool_limits(1):
        start = time.perf_counter()
        for seed in C8_SEEDS:
            for kind in ("train-lae", "train-ae", "train-vae"):
                res = run_experiment(image_cfg(kind, seed, out / f"{kind}-{seed}", digit_files), progress=None)
                curves[kind, seed] = res["report"].column("neg_elbo_per_dim")
        seconds = time.perf_counter() - start
    return curves, seconds


def _non_increasing_after_2(curve):
    return bool(np.all(np.diff(curve[1:]) <= 0.0))


@pytest.mark.slow
def test_criterion_8_training_ordering(image_runs):
    curves, seconds = image_runs
    final = {k: float(v[-1]) for k, v in curves.items()}
    beats_ae = sum(final["train-lae", s] <= final["train-ae", s] for s in C8_SEEDS)
    beats_vae = sum(final["train-lae", s] <= final["train-vae", s] for s in C8_SEEDS)
    majority = len(C8_SEEDS) // 2 + 1
    finite = all(np.all(np.isfinite(v)) and len(v) == C8_EPOCHS for v in curves.values())
    decreasing = [k for k, v in curves.items() if not _non_increasing_after_2(v)]
    ok = (beats_ae >= majority and beats_vae >= majority and finite and not decreasing
          and seconds < C8_SECONDS)
    table = "; ".join(f"seed {s}: LAE {final['train-lae', s]:.4f} AE {final['train-ae', s]:.4f} "
                      f"VAE {final['train-vae', s]:.4f}" for s in C8_SEEDS)
    verdict("8 (training ordering)", ok,
            f"LAE <= AE in {beats_ae}/3, LAE <= VAE in {beats_vae}/3 (needs >= {majority}); "
            f"finite {finite}; runs not decreasing after epoch 2: {len(decreasing)} "
            f"{[f'{k}/{s}' for k, s in decreasing]}; {seconds / 60:.1f} min (< {C8_SECONDS / 60:.0f}); {table}")
    assert ok


@pytest.mark.slow
def test_criterion_8_lae_smoke_threshold(image_runs):
    curves, _ = image_runs
    drops = [1.0 - curves["train-lae", s][-1] / curves["train-lae", s][0] for s in C8_SEEDS]
    ok = all(d >= C8_SMOKE_DROP for d in drops) and all(_non_increasing_after_2(curves["train-lae", s])
                                                        for s in C8_SEEDS)
    verdict("8 smoke (LAE curve)", ok,
            "relative drop from epoch 1 " + ", ".join(f"{d:.3f}" for d in drops)
            + f" (>= {C8_SMOKE_DROP}), non-increasing after epoch 2 in every seed")
    assert ok


# --------------------------------------------------------------- criterion 9
@pytest.mark.slow
def test_criterion_9_hoffman_sweep(tmp_path, digit_files):
    cfg = image_cfg("train-hoffman", 0, tmp_path, digit_files)
    cfg.sections["data"].update(n_train="1024", n_test="256")
    cfg.sections["trainer"]["epochs"] = "2"
    train, test = image_data(cfg)
    tcfg = lae_config(cfg)
    finals = {}
    with threadpool_limits(1):
        model, venc = build_image_model(cfg, len(train), train.shape[1])
        vae = train_vae(model, venc, train, tcfg, test, progress=None)
        for steps in C9_STEPS:
            model, venc = build_image_model(cfg, len(train), train.shape[1])
            rep = train_hoffman(model, venc, train, tcfg, steps, test, progress=None)
            finals[steps] = rep
    completed = all(len(r.rows) == tcfg.epochs and np.all(np.isfinite(r.column("neg_elbo_per_dim")))
                    for r in finals.values())
    hof0, ref = np.asarray(finals[0].batch_losses), np.asarray(vae.batch_losses)
    gap = float(np.max(np.abs(hof0 - ref) / np.abs(ref)))
    ok = completed and gap < C9_RTOL
    verdict("9 (Hoffman sweep)", ok,
            f"ld_steps {list(C9_STEPS)} completed {completed}; ld_steps=0 vs VAE max relative batch-loss gap "
            f"{gap:.3g} (< {C9_RTOL}); final neg ELBO/dim "
            + ", ".join(f"T={t}: {r.rows[-1].neg_elbo_per_dim:.4f}" for t, r in finals.items())
            + f", VAE {vae.rows[-1].neg_elbo_per_dim:.4f}")
    assert ok


# -------------------------------------------------------------- criterion 10
def test_criterion_10_selftest_determinism(tmp_path):
    lines = []
    run_selftest(tmp_path, progress=lines.append)
    matched = [line for line in lines if "reference match" in line]
    ok = len(lines) == len(CHECKS) and len(matched) == len(CHECKS)
    verdict("10 (determinism)", ok, f"{len(matched)}/{len(CHECKS)} reference CSVs reproduced bitwise")
    assert ok
