"""Deterministic self-checks compared bitwise against reference CSV files.

``selftest`` reruns four fixed-seed computations and writes one CSV per
check: the conjugate-posterior ALD run (``conjugate_ald.csv``), the
one-hot ALD versus per-datapoint LD trajectories (``onehot_equivalence.csv``),
autodiff versus finite-difference gradients (``gradients.csv``) and the
discretized logistic normalization sums (``logistic_normalization.csv``).
Every file must match the packaged reference byte for byte.
"""

from __future__ import annotations

import csv
import io
import tempfile
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..encoder import AmortizedEncoder
from ..gradcheck import check_gradients
from ..models import (TOY_SIGMA_X, DiscretizedLogisticLikelihood, GaussianPrior, LatentVariableModel,
                      NeuralGaussianLikelihood, conjugate_gaussian_model, discretized_logistic_logprob,
                      pixels_to_unit)
from ..samplers import SamplerConfig, run_ald, run_ld
from ..trainers import lae_loss
from .config import default_config
from .experiments import conjugate_ald

REFERENCE_DIR = Path(__file__).with_name("reference")
SELFTEST_SEED = 0
GRAD_TOL = 1e-4
NORM_TOL = 1e-9
EQUIV_TOL = 1e-10


def _csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


# ------------------------------------------------------------------ checks
def conjugate_check(seed: int = SELFTEST_SEED, every: int = 50) -> tuple[str, dict]:
    """Conjugate-posterior ALD (n=3, d=128, 3000 steps): metrics plus thinned samples."""
    with tempfile.TemporaryDirectory() as tmp:
        cfg = default_config("conjugate-ald", seed, tmp)
        res = conjugate_ald(cfg)
    rows = [("metric", r["datapoint"], k, r[k]) for r in res["rows"]
            for k in ("mean_err", "cov_frob_err", "hist_tv")]
    samples = res["store"].samples
    for t in range(0, samples.shape[0], every):
        for i in range(samples.shape[1]):
            rows.extend(("sample", i, f"step{t}_z{k}", samples[t, i, k]) for k in range(samples.shape[2]))
    passed = res["max_mean_err"] < 0.1 and res["max_cov_frob_err"] < 0.15
    return _csv_text(["kind", "datapoint", "key", "value"], rows), {
        "passed": passed, "max_mean_err": res["max_mean_err"], "max_cov_frob_err": res["max_cov_frob_err"]}


def onehot_trajectories(seed: int = SELFTEST_SEED, steps: int = 1000, n: int = 3, eta: float = 4e-4,
                        model: LatentVariableModel | None = None):
    """ALD with one-hot features versus per-datapoint LD driven by the same noise.

    Both run without MH so each update is the deterministic function of the
    shared noise (a joint accept/reject over Phi and per-chain tests over
    each z_i are different kernels).  Returns ``(ald, ld)`` trajectories of
    shape ``(steps, n, d_z)``.
    """
    rng = np.random.default_rng(seed)
    if model is None:
        model = conjugate_gaussian_model(np.zeros(2), np.eye(2), TOY_SIGMA_X)
    dz = model.latent_dim
    X = rng.standard_normal((n, model.obs_dim))
    z0 = rng.standard_normal((n, dz))
    noise = rng.standard_normal((steps, dz, n))
    cfg = SamplerConfig(eta, steps, 0, mh_correction=False)
    enc = AmortizedEncoder.one_hot(n, dz, phi=z0.T)
    ald = run_ald(model, X, enc, cfg, noise=noise).samples
    ld = np.stack([run_ld(model, X[i], cfg, z0[i], noise=noise[:, :, i].copy()).samples[:, 0]
                   for i in range(n)], axis=1)
    return ald, ld


def onehot_check(seed: int = SELFTEST_SEED) -> tuple[str, dict]:
    ald, ld = onehot_trajectories(seed)
    dev = float(np.max(np.abs(ald - ld)))
    rows = [("max_abs_deviation", -1, -1, dev)]
    for t in range(0, len(ald), 100):
        rows.extend((f"ald_step{t}", i, k, ald[t, i, k]) for i in range(ald.shape[1]) for k in range(ald.shape[2]))
    rows.extend(("ald_final", i, k, ald[-1, i, k]) for i in range(ald.shape[1]) for k in range(ald.shape[2]))
    return _csv_text(["key", "datapoint", "coordinate", "value"], rows), {
        "passed": dev < EQUIV_TOL, "max_abs_deviation": dev}


def gradient_cases(seed: int = SELFTEST_SEED):
    """Named closures ``(fn, params)`` covering the latent, ALD and LAE-update gradients."""
    rng = np.random.default_rng(seed)
    cases = []

    # latent potential of a small neural-likelihood model (gradient in z)
    neural = LatentVariableModel(GaussianPrior.standard(2),
                                 NeuralGaussianLikelihood.random(rng, hidden=(5, 5), sigma=0.5))
    x = rng.standard_normal(2)
    z = Tensor(rng.standard_normal(2), requires_grad=True)
    cases.append(("latent_potential_z", lambda: ad.tsum(neural.potential(x, z)), [z]))

    # ALD potential V(Phi) with a small feature extractor
    X = rng.standard_normal((3, 2))
    enc = AmortizedEncoder.mlp(2, 2, rng, d=4, hidden=(4,), phi_std=0.5)
    G = enc.features(X).data
    phi = Tensor(enc.phi.data.copy(), requires_grad=True)
    cases.append(("ald_potential_phi",
                  lambda: ad.tsum(neural.potential(X, ad.matmul(G, ad.transpose(phi)))), [phi]))

    # LAE update objective: d_z = 1, two datapoints, T = 2, chain states frozen
    lik = DiscretizedLogisticLikelihood.build(rng, 1, 4, m=10, hidden=(3,), b_init=0.3)
    lae_model = LatentVariableModel(GaussianPrior.standard(1), lik)
    Xp = pixels_to_unit(rng.integers(0, 256, size=(2, 4)))
    lae_enc = AmortizedEncoder.mlp(4, 1, rng, d=2, hidden=(3,), phi_std=0.7)
    phis = [lae_enc.phi.data + 0.1 * rng.standard_normal(lae_enc.phi.shape) for _ in range(2)]
    for estimator in ("time_averaged", "final_sample"):
        fn = (lambda est=estimator: lae_loss(lae_model, lae_enc, Xp, phis, est))
        cases.append((f"lae_{estimator}_theta", fn, lae_model.parameters()))
        cases.append((f"lae_{estimator}_psi", fn, lae_enc.feature_parameters()))
    return cases


def gradient_check(seed: int = SELFTEST_SEED) -> tuple[str, dict]:
    rows = []
    worst = 0.0
    for name, fn, params in gradient_cases(seed):
        err = check_gradients(fn, params)
        n_params = sum(p.size for p in params)
        worst = max(worst, err)
        rows.append((name, n_params, err))
    return _csv_text(["case", "n_params", "relative_error"], rows), {"passed": worst < GRAD_TOL, "worst": worst}


def logistic_sums(seed: int = SELFTEST_SEED, pairs: int = 100) -> np.ndarray:
    """Total probability over the 256 pixel values for random ``(mu, b)`` pairs."""
    rng = np.random.default_rng(seed)
    grid = pixels_to_unit(np.arange(256)).reshape(1, -1)
    mus = rng.uniform(-1.5, 1.5, pairs)
    bs = rng.uniform(-5.0, 8.0, pairs)
    sums = np.empty(pairs)
    for j, (mu, b) in enumerate(zip(mus, bs)):
        inv_scale = ad.power(ad.softplus(Tensor(b)), 0.5)
        lp = discretized_logistic_logprob(grid, Tensor(np.full_like(grid, mu)), inv_scale).data
        sums[j] = np.sum(np.exp(lp))
    return np.stack([mus, bs, sums], axis=1)


def normalization_check(seed: int = SELFTEST_SEED) -> tuple[str, dict]:
    table = logistic_sums(seed)
    dev = float(np.max(np.abs(table[:, 2] - 1.0)))
    return _csv_text(["mu", "b", "total_probability"], table.tolist()), {"passed": dev < NORM_TOL,
                                                                        "max_deviation": dev}


# The conjugate run's tolerance outcome is reported but does not gate the
# self-test: the run is slow-mixing at 3000 steps and its pass/fail is judged
# by the acceptance suite, while selftest guards bitwise reproducibility.
INFORMATIONAL = {"conjugate_ald.csv"}

CHECKS = {
    "conjugate_ald.csv": conjugate_check,
    "onehot_equivalence.csv": onehot_check,
    "gradients.csv": gradient_check,
    "logistic_normalization.csv": normalization_check,
}


def run_selftest(out_dir=None, reference_dir=REFERENCE_DIR, update: bool = False, progress=print) -> bool:
    """Recompute every check, write its CSV, and compare with the reference bytes.

    With ``update=True`` the reference files are (re)written instead.
    Returns whether every check reproduced its reference and met its
    tolerance (tolerances of :data:`INFORMATIONAL` checks are only reported).
    """
    reference_dir = Path(reference_dir)
    ok = True
    for name, check in CHECKS.items():
        text, info = check()
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / name).write_text(text)
        ref = reference_dir / name
        if update:
            reference_dir.mkdir(parents=True, exist_ok=True)
            ref.write_text(text)
            same = True
        else:
            same = ref.exists() and ref.read_bytes() == text.encode()
        gated = info["passed"] or name in INFORMATIONAL
        ok &= same and gated
        detail = ", ".join(f"{k}={v}" for k, v in info.items() if k != "passed")
        if progress is not None:
            progress(f"{'PASS' if same and gated else 'FAIL'} {name}: "
                     f"reference {'match' if same else 'MISMATCH'}; tolerance {'met' if info['passed'] else 'NOT met'} "
                     f"({detail})")
    return ok
