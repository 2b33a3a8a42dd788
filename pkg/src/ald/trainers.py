"""Training loops: the Langevin autoencoder and its comparison baselines.

All trainers share one minibatch schedule (a fresh permutation per epoch from
the run's generator) so runs that consume randomness identically can be
compared draw for draw.  Objectives are normalized per datapoint:
``V / n`` plus the likelihood's regularizer, which is itself already divided
by the training-set size.  The Langevin moves on Phi use the un-normalized
batch potential ``V``, so their stationary law is the exact posterior.
"""

from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import AmortizedEncoder, check_capacity
from .models import LatentVariableModel
from .nn import MLP, MLPSpec, Module
from .optim import make_optimizer
from .samplers import (ChainState, DivergenceError, SamplerError, ald_energy, batched_ld,
                       langevin_transition)

LOG_2PI = math.log(2.0 * math.pi)
ESTIMATORS = ("time_averaged", "final_sample")
MAX_SKIP_FRACTION = 0.01
SIGMA_FLOOR = 1e-4


class TrainingError(RuntimeError):
    """Raised when a run must stop, e.g. on a non-finite loss."""


class ElboError(RuntimeError):
    pass


@dataclass
class LAEConfig:
    """Hyper-parameters shared by every trainer.

    ``ald_steps`` is T, the number of Langevin moves on Phi per minibatch.
    ``ald_steps=0`` is the degenerate setting in which Phi is trained by
    gradient descent together with the other weights (the prior-regularized
    autoencoder).  ``encoder_learning_rate`` defaults to ``learning_rate``.
    """

    ald_steps: int = 2
    learning_rate: float = 1e-4
    encoder_learning_rate: float | None = None
    batch_size: int = 100
    step_size: float = 1e-4
    epochs: int = 1
    seed: int = 0
    estimator: str = "time_averaged"
    mh_correction: bool = True
    optimizer: str = "sgd"
    eval_sigma: float = 0.05
    eval_samples: int = 16

    def __post_init__(self):
        if self.ald_steps < 0:
            raise ValueError("ald_steps must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not (self.learning_rate > 0 and self.step_size > 0):
            raise ValueError("learning_rate and step_size must be positive")
        if self.encoder_learning_rate is None:
            self.encoder_learning_rate = self.learning_rate
        if not self.encoder_learning_rate > 0:
            raise ValueError("encoder_learning_rate must be positive")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")


@dataclass
class EpochRecord:
    epoch: int
    mean_potential: float
    neg_elbo_per_dim: float
    acceptance_rate: float
    wall_clock: float
    aborted: bool = False
    diagnostic: str = ""


@dataclass
class TrainReport:
    """Per-epoch summaries plus the per-minibatch training loss trajectory."""

    rows: list[EpochRecord] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)

    def add(self, record: EpochRecord) -> None:
        if self.rows and record.epoch != self.rows[-1].epoch + 1:
            raise ValueError("epochs must be appended in order")
        self.rows.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    def to_csv(self, path) -> None:
        names = list(EpochRecord.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.rows:
                d = asdict(r)
                w.writerow([repr(v) if isinstance(v, float) else v for v in (d[k] for k in names)])


class GaussianVariationalEncoder(Module):
    """``q(z | x) = N(mu(x), diag(exp(logvar(x))))`` from one network with ``2 d_z`` outputs."""

    def __init__(self, net, latent_dim: int):
        self.net = net
        self.latent_dim = int(latent_dim)

    @classmethod
    def mlp(cls, obs_dim: int, latent_dim: int, rng: np.random.Generator, hidden=(128,), *,
            layer_norm: bool = True) -> "GaussianVariationalEncoder":
        return cls(MLP(MLPSpec(obs_dim, tuple(hidden), 2 * latent_dim, layer_norm=layer_norm), rng),
                   latent_dim)

    def __call__(self, X) -> tuple[Tensor, Tensor]:
        h = self.net(np.asarray(X, dtype=np.float64))
        if h.shape[1] != 2 * self.latent_dim:
            raise ad.DimensionError(f"encoder network must output {2 * self.latent_dim} columns")
        return h[:, :self.latent_dim], h[:, self.latent_dim:]

    def rsample(self, X, eps: np.ndarray) -> tuple[Tensor, Tensor]:
        """Reparameterized draw ``z = mu + exp(logvar / 2) * eps`` and its ``log q`` per row."""
        mu, logvar = self(X)
        z = mu + ad.exp(logvar * 0.5) * eps
        logq = ad.tsum(logvar * -0.5 - 0.5 * (eps * eps + LOG_2PI), axis=1)
        return z, logq


class GaussianProposal:
    """Fixed per-datapoint Gaussians ``N(mean_i, cov_i)`` used as an ELBO proposal."""

    def __init__(self, means, covs):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        covs = np.asarray(covs, dtype=np.float64)
        if covs.ndim == 2:
            covs = np.broadcast_to(covs, (len(self.means), *covs.shape))
        self.chols = np.linalg.cholesky(covs)
        self.logdets = 2.0 * np.sum(np.log(np.diagonal(self.chols, axis1=1, axis2=2)), axis=1)

    def sample(self, X, K: int, rng: np.random.Generator, index=None):
        idx = np.arange(len(X)) if index is None else np.asarray(index)
        eps = rng.standard_normal((K, len(idx), self.means.shape[1]))
        Z = self.means[idx] + np.einsum("nij,knj->kni", self.chols[idx], eps)
        dz = self.means.shape[1]
        logq = -0.5 * np.sum(eps ** 2, axis=2) - 0.5 * (dz * LOG_2PI + self.logdets[idx])
        return Z, logq


# ------------------------------------------------------------------ helpers
def _as_data(data) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise ad.DimensionError(f"data must be a non-empty (m, d_x) array, got {data.shape}")
    return data


def _batches(m: int, n: int, rng: np.random.Generator):
    perm = rng.permutation(m)
    for s in range(0, m, n):
        yield perm[s:s + n]


def _say(progress, text: str) -> None:
    if progress is not None:
        progress(text)


def _zero(params) -> None:
    for p in params:
        p.grad = None


def _check_loss(loss: Tensor) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite training loss {value}")
    return value


def _eval_rng(seed: int, epoch: int) -> np.random.Generator:
    # evaluation draws come from their own stream so they never shift training noise
    return np.random.default_rng([seed, 7919, epoch])


def _eval(model, q, heldout, cfg: LAEConfig, epoch: int) -> float:
    if heldout is None:
        return float("nan")
    return evaluate_elbo(model, q, heldout, cfg.eval_sigma, cfg.eval_samples, rng=_eval_rng(cfg.seed, epoch))


# ---------------------------------------------------------------------- LAE
def ald_inner_loop(model: LatentVariableModel, X: np.ndarray, G: np.ndarray, phi: np.ndarray,
                   cfg: LAEConfig, rng: np.random.Generator) -> tuple[list[np.ndarray], int]:
    """T Langevin moves on Phi for one minibatch with theta and psi held fixed.

    Returns the post-move states ``Phi_1..Phi_T`` (a rejected move repeats
    the previous state) and the number of accepted moves.
    """
    energy = ald_energy(model, X, G)
    u0, g0 = energy(phi)
    state = ChainState(np.array(phi, dtype=np.float64), u0, g0)
    states = []
    for _ in range(cfg.ald_steps):
        xi = rng.standard_normal(state.position.shape)
        langevin_transition(energy, state, cfg.step_size, xi, rng, cfg.mh_correction)
        states.append(state.position.copy())
    return states, state.accepted


def lae_loss(model: LatentVariableModel, encoder: AmortizedEncoder, X: np.ndarray,
             phis: list, estimator: str = "time_averaged") -> Tensor:
    """Per-datapoint update objective for theta and psi given the chain states.

    ``time_averaged`` averages ``V(Phi_t) / n`` over all states;
    ``final_sample`` uses the last state only.  Each ``Phi_t`` enters as a
    constant; passing the encoder's own ``phi`` tensor makes Phi trainable
    (the autoencoder case).
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}")
    if not phis:
        raise ValueError("need at least one encoder state")
    used = phis[-1:] if estimator == "final_sample" else phis
    n = X.shape[0]
    G = encoder.features(X)
    Z = ad.concat([encoder.encode(X, phi=p, G=G) for p in used], axis=0)
    Xrep = np.tile(X, (len(used), 1))
    v = ad.tsum(model.potential(Xrep, Z)) * (1.0 / (n * len(used)))
    return v + model.regularizer()


def train_lae(model: LatentVariableModel, encoder: AmortizedEncoder, data, cfg: LAEConfig,
              heldout=None, progress: Callable[[str], None] | None = print) -> TrainReport:
    """Langevin autoencoder training.

    Per minibatch: T MH-corrected Langevin moves on Phi with theta and psi
    fixed, then one gradient step on theta (``learning_rate``) and psi
    (``encoder_learning_rate``) against :func:`lae_loss`.  With
    ``cfg.ald_steps == 0`` Phi joins the gradient step instead.

    A sampler divergence ends the current epoch (recorded as aborted); a
    non-finite loss raises :class:`TrainingError`.
    """
    data = _as_data(data)
    rng = np.random.default_rng(cfg.seed)
    check_capacity(encoder, min(cfg.batch_size, len(data)))
    autoencoder = cfg.ald_steps == 0
    theta = model.parameters()
    psi = encoder.feature_parameters() + ([encoder.phi] if autoencoder else [])
    opt_theta = make_optimizer(cfg.optimizer, theta, cfg.learning_rate)
    opt_psi = make_optimizer(cfg.optimizer, psi, cfg.encoder_learning_rate)

    report = TrainReport()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        vs, n_acc, n_prop = [], 0, 0
        aborted, diag = False, ""
        for idx in _batches(len(data), cfg.batch_size, rng):
            X = data[idx]
            if autoencoder:
                phis = [encoder.phi]
            else:
                G = encoder.features(X).data
                try:
                    phis, acc = ald_inner_loop(model, X, G, encoder.phi.data, cfg, rng)
                except DivergenceError as exc:
                    aborted, diag = True, f"epoch {epoch}: {exc}"
                    break
                n_acc += acc
                n_prop += cfg.ald_steps
                encoder.phi.data[...] = phis[-1]
            _zero(theta + psi)
            try:
                loss = lae_loss(model, encoder, X, phis, cfg.estimator)
            except ad.NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch}: non-finite loss ({exc})") from exc
            value = _check_loss(loss)
            vs.append(value - _reg_value(model))
            ad.backward(loss)
            opt_theta.step()
            opt_psi.step()
            report.batch_losses.append(value)
        rec = EpochRecord(epoch, float(np.mean(vs)) if vs else float("nan"),
                          _eval(model, encoder, heldout, cfg, epoch),
                          n_acc / n_prop if n_prop else float("nan"),
                          time.perf_counter() - t0, aborted, diag)
        report.add(rec)
        _say(progress, _progress_line("lae" if not autoencoder else "ae", rec))
    return report


def train_autoencoder(model, encoder, data, cfg: LAEConfig, heldout=None, progress=print) -> TrainReport:
    """Prior-regularized autoencoder: :func:`train_lae` with no Langevin moves."""
    from dataclasses import replace
    return train_lae(model, encoder, data, replace(cfg, ald_steps=0), heldout, progress)


def _reg_value(model) -> float:
    reg = model.regularizer()
    return reg.item() if isinstance(reg, Tensor) else float(reg)


def _progress_line(tag: str, rec: EpochRecord) -> str:
    line = (f"[{tag}] epoch {rec.epoch}: mean_V={rec.mean_potential:.6g} "
            f"neg_elbo/dim={rec.neg_elbo_per_dim:.6g} accept={rec.acceptance_rate:.3f} "
            f"time={rec.wall_clock:.2f}s")
    return line + (f" ABORTED ({rec.diagnostic})" if rec.aborted else "")


# --------------------------------------------------------------- baselines
def _vae_terms(model, venc: GaussianVariationalEncoder, X, eps):
    z, logq = venc.rsample(X, eps)
    elbo = ad.tsum(model.log_joint(X, z) - logq)
    return z, elbo


def train_vae(model: LatentVariableModel, venc: GaussianVariationalEncoder, data, cfg: LAEConfig,
              heldout=None, progress: Callable[[str], None] | None = print) -> TrainReport:
    """Single-sample reparameterized ELBO ascent on decoder and encoder jointly."""
    return _train_amortized_gaussian(model, venc, data, cfg, None, heldout, progress, "vae")


def train_hoffman(model: LatentVariableModel, venc: GaussianVariationalEncoder, data, cfg: LAEConfig,
                  ld_steps: int, heldout=None,
                  progress: Callable[[str], None] | None = print) -> TrainReport:
    """Encoder-initialized Langevin dynamics.

    Per minibatch: draw ``z0 ~ q(z | x)``, refine it with ``ld_steps``
    MH-corrected per-datapoint Langevin moves (step ``cfg.step_size``),
    update the decoder on the potential at the refined sample and the
    encoder on the ELBO.  With ``ld_steps == 0`` this computes the same
    updates as :func:`train_vae`.
    """
    if ld_steps < 0:
        raise ValueError("ld_steps must be non-negative")
    return _train_amortized_gaussian(model, venc, data, cfg, ld_steps, heldout, progress, "hoffman")


def _train_amortized_gaussian(model, venc, data, cfg, ld_steps, heldout, progress, tag) -> TrainReport:
    data = _as_data(data)
    rng = np.random.default_rng(cfg.seed)
    theta = model.parameters()
    phi = venc.parameters()
    opt_theta = make_optimizer(cfg.optimizer, theta, cfg.learning_rate)
    opt_phi = make_optimizer(cfg.optimizer, phi, cfg.encoder_learning_rate)
    report = TrainReport()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        vs, n_acc, n_prop = [], 0, 0
        aborted, diag = False, ""
        for idx in _batches(len(data), cfg.batch_size, rng):
            X = data[idx]
            n = len(X)
            eps = rng.standard_normal((n, model.latent_dim))
            _zero(theta + phi)
            try:
                if ld_steps is None:
                    _, elbo = _vae_terms(model, venc, X, eps)
                    loss = elbo * (-1.0 / n) + model.regularizer()
                    reported = loss
                else:
                    with ad.frozen(theta):
                        z0, elbo = _vae_terms(model, venc, X, eps)
                    try:
                        zT, acc = batched_ld(model, X, z0.data, cfg.step_size, ld_steps, rng,
                                             cfg.mh_correction)
                    except (DivergenceError, SamplerError) as exc:
                        aborted, diag = True, f"epoch {epoch}: {exc}"
                        break
                    n_acc += acc
                    n_prop += n * ld_steps
                    decoder_term = ad.tsum(model.potential(X, Tensor(zT))) * (1.0 / n)
                    loss = elbo * (-1.0 / n) + decoder_term + model.regularizer()
                    reported = elbo * (-1.0 / n) + _reg_value(model)
            except ad.NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch}: non-finite loss ({exc})") from exc
            _check_loss(loss)
            value = _check_loss(reported)
            vs.append(value - _reg_value(model))
            ad.backward(loss)
            opt_theta.step()
            opt_phi.step()
            report.batch_losses.append(value)
        rec = EpochRecord(epoch, float(np.mean(vs)) if vs else float("nan"),
                          _eval(model, venc, heldout, cfg, epoch),
                          n_acc / n_prop if n_prop else float("nan"),
                          time.perf_counter() - t0, aborted, diag)
        report.add(rec)
        _say(progress, _progress_line(tag if ld_steps is None else f"{tag} T={ld_steps}", rec))
    return report


# ------------------------------------------------------------------- ELBO
@dataclass
class ElboEstimate:
    """Negative ELBO per data dimension with its Monte Carlo standard error."""

    value: float
    stderr: float
    n_terms: int
    skipped: int
    sigma_flagged: bool = False


def _proposal_draws(q, X: np.ndarray, sigma: float, K: int, rng: np.random.Generator):
    """``(Z, logq)`` of shapes ``(K, n, d_z)`` and ``(K, n)`` for one data chunk."""
    if isinstance(q, AmortizedEncoder):
        mean = q.encode(X).data
        eps = rng.standard_normal((K, *mean.shape))
        Z = mean + sigma * eps
        dz = mean.shape[1]
        logq = -0.5 * np.sum(eps ** 2, axis=2) - dz * math.log(sigma) - 0.5 * dz * LOG_2PI
        return Z, logq
    if isinstance(q, GaussianVariationalEncoder):
        mu, logvar = (t.data for t in q(X))
        eps = rng.standard_normal((K, *mu.shape))
        Z = mu + np.exp(0.5 * logvar) * eps
        logq = np.sum(-0.5 * logvar - 0.5 * (eps ** 2 + LOG_2PI), axis=2)
        return Z, logq
    if hasattr(q, "sample"):
        return q.sample(X, K, rng)
    raise TypeError(f"unsupported proposal {type(q).__name__}")


def _log_joint_rows(model: LatentVariableModel, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """``log p(x_i, z_i)`` per row; rows whose value is non-finite come back as NaN."""
    try:
        return model.log_joint(X, Tensor(Z)).data.copy()
    except ad.NonFiniteError:
        out = np.empty(len(Z))
        for r in range(len(Z)):
            try:
                out[r] = model.log_joint(X[r:r + 1], Tensor(Z[r:r + 1])).data[0]
            except ad.NonFiniteError:
                out[r] = np.nan
        return out


def estimate_elbo(model: LatentVariableModel, q, data, sigma: float = 0.05, K: int = 16,
                  rng: np.random.Generator | None = None, chunk: int = 256) -> ElboEstimate:
    """Monte Carlo negative ELBO per dimension, ``-(1/d_x) E[log p(x, z) - log q(z)]``.

    Args:
        q: an :class:`AmortizedEncoder` (proposal ``N(Phi g(x), sigma^2 I)``),
            a :class:`GaussianVariationalEncoder` (its own mean and variance;
            ``sigma`` unused), or any object with
            ``sample(X, K, rng, index) -> (Z, logq)``.
        K: proposal draws per datapoint.

    Non-finite terms are skipped and counted; more than 1% skipped raises
    :class:`ElboError`.  ``sigma`` below ``1e-4`` is flagged with a warning
    because the entropy term then dominates.  A ``q`` of any other type
    without a ``sample`` method raises :class:`TypeError`.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if K < 1:
        raise ValueError("K must be at least 1")
    if not isinstance(q, (AmortizedEncoder, GaussianVariationalEncoder)) and not hasattr(q, "sample"):
        raise TypeError(f"cannot draw latents from a {type(q).__name__}")
    flagged = sigma < SIGMA_FLOOR and isinstance(q, AmortizedEncoder)
    if flagged:
        warnings.warn(f"proposal sigma={sigma:g} is below {SIGMA_FLOOR:g}; the entropy term diverges",
                      stacklevel=2)
    data = _as_data(data)
    rng = np.random.default_rng(0) if rng is None else rng
    d_x = data.shape[1]
    terms = []
    with ad.frozen(model.parameters() + (q.parameters() if isinstance(q, Module) else [])):
        for s in range(0, len(data), chunk):
            X = data[s:s + chunk]
            if isinstance(q, (AmortizedEncoder, GaussianVariationalEncoder)):
                Z, logq = _proposal_draws(q, X, sigma, K, rng)
            else:
                Z, logq = q.sample(X, K, rng, np.arange(s, s + len(X)))
            lj = _log_joint_rows(model, np.tile(X, (K, 1)), Z.reshape(K * len(X), -1))
            terms.append((lj.reshape(K, len(X)) - logq).ravel())
    terms = np.concatenate(terms)
    finite = np.isfinite(terms)
    skipped = int((~finite).sum())
    if skipped > MAX_SKIP_FRACTION * terms.size:
        raise ElboError(f"{skipped} of {terms.size} ELBO terms were non-finite (limit 1%)")
    good = terms[finite]
    se = float(np.std(good, ddof=1) / math.sqrt(good.size) / d_x) if good.size > 1 else float("nan")
    return ElboEstimate(float(-np.mean(good) / d_x), se, int(good.size), skipped, flagged)


def evaluate_elbo(model: LatentVariableModel, q, data, sigma: float = 0.05, K: int = 16,
                  rng: np.random.Generator | None = None) -> float:
    """Negative ELBO per data dimension in nats (see :func:`estimate_elbo`)."""
    return estimate_elbo(model, q, data, sigma, K, rng).value
