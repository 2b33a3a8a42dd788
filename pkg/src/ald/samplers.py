"""Langevin samplers over latents (LD) and over encoder weights (ALD).

Both samplers share one chain driver: an Euler-Maruyama proposal
``y = x - eta * grad U(x) + sqrt(2 eta) * xi`` optionally followed by a
Metropolis-Hastings accept/reject test computed in log space.  For LD the
state is a single latent vector; for ALD it is the encoder matrix Phi and
the recorded samples are the induced latents ``Phi @ g(x_i)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import AmortizedEncoder, check_capacity
from .models import LatentVariableModel

DIVERGENCE_LIMIT = 1e8


class SamplerError(RuntimeError):
    pass


class DivergenceError(SamplerError):
    pass


@dataclass
class SamplerConfig:
    step_size: float
    total_steps: int
    burn_in: int = 0
    mh_correction: bool = True
    inverse_temperature: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not self.inverse_temperature > 0:
            raise ValueError("inverse_temperature must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0 <= self.burn_in < self.total_steps:
            raise ValueError("burn_in must satisfy 0 <= burn_in < total_steps")


@dataclass
class ChainState:
    """Current position of a chain plus cached energy and acceptance counters."""

    position: np.ndarray
    potential: float
    grad: np.ndarray
    accepted: int = 0
    rejected: int = 0
    nonfinite: int = 0

    @property
    def acceptance_rate(self) -> float:
        total = self.accepted + self.rejected
        return self.accepted / total if total else float("nan")


@dataclass
class SampleStore:
    """Per-datapoint sample sets collected along a chain.

    ``samples[t, i]`` is the latent of datapoint i after step t; entries with
    ``t >= burn_in`` are the usable draws.  ``accepted`` has one flag per
    step for a shared chain, or shape ``(steps, n)`` for independent chains.
    """

    samples: np.ndarray
    accepted: np.ndarray
    burn_in: int
    state: ChainState | None = None
    potentials: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n_datapoints(self) -> int:
        return self.samples.shape[1]

    @property
    def n_steps(self) -> int:
        return self.samples.shape[0]

    def usable(self, i: int = 0) -> np.ndarray:
        return self.samples[self.burn_in:, i]

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if self.accepted.size else float("nan")

    def to_csv(self, path) -> None:
        """Write columns ``step, datapoint_index, z_0..z_{d_z-1}, accepted``."""
        dz = self.samples.shape[2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "datapoint_index", *[f"z_{k}" for k in range(dz)], "accepted"])
            for t in range(self.n_steps):
                for i in range(self.n_datapoints):
                    acc = int(self.accepted[t, i] if self.accepted.ndim == 2 else self.accepted[t])
                    w.writerow([t, i, *[repr(float(v)) for v in self.samples[t, i]], acc])

    def acceptance_report(self) -> str:
        lines = [
            f"steps: {self.n_steps}",
            f"burn_in: {self.burn_in}",
            f"datapoints: {self.n_datapoints}",
            f"acceptance_rate: {self.acceptance_rate:.6f}",
        ]
        if self.state is not None:
            lines.append(f"nonfinite_rejections: {self.state.nonfinite}")
        return "\n".join(lines) + "\n"


def merge_stores(stores: list[SampleStore]) -> SampleStore:
    """Stack independent single-datapoint chains into one store."""
    samples = np.concatenate([s.samples for s in stores], axis=1)
    accepted = np.stack([s.accepted for s in stores], axis=1)
    return SampleStore(samples, accepted, stores[0].burn_in)


# ---------------------------------------------------------------- primitives
def langevin_propose(z: np.ndarray, grad: np.ndarray, eta: float, noise: np.ndarray) -> np.ndarray:
    """Euler-Maruyama step ``z - eta * grad + sqrt(2 eta) * noise``."""
    if eta <= 0:
        raise ValueError("step size must be positive")
    z, grad, noise = (np.asarray(a, dtype=np.float64) for a in (z, grad, noise))
    if z.shape != grad.shape or z.shape != noise.shape:
        raise ad.DimensionError("state, gradient and noise shapes differ")
    if not np.all(np.isfinite(grad)):
        raise SamplerError("non-finite gradient in Langevin proposal")
    return z - eta * grad + math.sqrt(2.0 * eta) * noise


def gaussian_proposal_logdensity(z_to, z_from, grad_from, eta: float) -> float:
    """``log N(z_to; z_from - eta * grad_from, 2 eta I)`` including constants."""
    if eta <= 0:
        raise ValueError("step size must be positive")
    r = np.asarray(z_to, dtype=np.float64) - (np.asarray(z_from, dtype=np.float64) - eta * np.asarray(grad_from))
    dim = r.size
    return float(-np.sum(r * r) / (4.0 * eta) - 0.5 * dim * math.log(4.0 * math.pi * eta))


def mh_accept(u_cur: float, u_prop: float, logq_fwd: float, logq_rev: float, u: float,
              state: ChainState | None = None) -> bool:
    """Metropolis-Hastings test for a move from the current to the proposed state.

    Accept iff ``log u < (-u_prop + logq_rev) - (-u_cur + logq_fwd)``.  A
    non-finite input rejects the move and bumps ``state.nonfinite``.
    """
    values = (u_cur, u_prop, logq_fwd, logq_rev)
    if not all(math.isfinite(v) for v in values) or not 0.0 < u < 1.0 + 1e-300:
        if state is not None:
            state.nonfinite += 1
        return False
    log_alpha = (-u_prop + logq_rev) - (-u_cur + logq_fwd)
    return math.log(u) < log_alpha


# -------------------------------------------------------------- chain driver
EnergyFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def _check_divergence(position: np.ndarray) -> None:
    if not np.all(np.isfinite(position)) or np.max(np.abs(position)) > DIVERGENCE_LIMIT:
        raise DivergenceError(f"chain diverged (|state|_inf > {DIVERGENCE_LIMIT:g})")


def _safe_energy(energy: EnergyFn, position: np.ndarray) -> tuple[float, np.ndarray | None]:
    try:
        return energy(position)
    except ad.NonFiniteError:
        return float("inf"), None


def langevin_transition(energy: EnergyFn, state: ChainState, eta: float, xi: np.ndarray,
                        rng: np.random.Generator, mh_correction: bool = True) -> bool:
    """Propose from ``state`` with noise ``xi``; update ``state`` in place if accepted.

    The MH uniform is drawn from ``rng`` after the proposal noise.  Returns
    whether the move was accepted; a rejected move leaves ``state.position``
    untouched.
    """
    prop = langevin_propose(state.position, state.grad, eta, xi)
    _check_divergence(prop)
    u_prop, g_prop = _safe_energy(energy, prop)
    if mh_correction:
        u = rng.uniform()
        if g_prop is None:
            ok = mh_accept(state.potential, u_prop, 0.0, 0.0, u, state)
        else:
            logq_fwd = gaussian_proposal_logdensity(prop, state.position, state.grad, eta)
            logq_rev = gaussian_proposal_logdensity(state.position, prop, g_prop, eta)
            ok = mh_accept(state.potential, u_prop, logq_fwd, logq_rev, u, state)
    else:
        if g_prop is None:
            raise SamplerError("potential became non-finite without MH correction")
        ok = True
    if ok:
        state.position, state.potential, state.grad = prop, u_prop, g_prop
        state.accepted += 1
    else:
        state.rejected += 1
    return ok


def run_chain(energy: EnergyFn, position0: np.ndarray, cfg: SamplerConfig,
              record: Callable[[np.ndarray], np.ndarray], noise: np.ndarray | None = None,
              rng: np.random.Generator | None = None, on_step=None) -> SampleStore:
    """Run ``cfg.total_steps`` Langevin transitions from ``position0``.

    Args:
        energy: returns ``(beta * U, grad)`` at a position.
        record: maps a position to the ``(n, d_z)`` latents stored for it.
        noise: optional pre-drawn standard normal array of shape
            ``(total_steps, *position.shape)``; when omitted noise comes from
            the chain's private generator.  Per step the proposal noise is
            drawn before the uniform used by the MH test.
        on_step: optional callback ``(t, state)`` run after every transition.
    """
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    eta = cfg.step_size
    pos = np.array(position0, dtype=np.float64)
    _check_divergence(pos)
    u0, g0 = energy(pos)
    state = ChainState(pos, u0, g0)
    if noise is not None and noise.shape != (cfg.total_steps, *pos.shape):
        raise ad.DimensionError(f"noise must have shape {(cfg.total_steps, *pos.shape)}")

    first = record(pos)
    samples = np.empty((cfg.total_steps, *first.shape))
    accepted = np.zeros(cfg.total_steps, dtype=bool)
    potentials = np.empty(cfg.total_steps)

    for t in range(cfg.total_steps):
        xi = rng.standard_normal(pos.shape) if noise is None else noise[t]
        ok = langevin_transition(energy, state, eta, xi, rng, cfg.mh_correction)
        accepted[t] = ok
        samples[t] = record(state.position)
        potentials[t] = state.potential
        if on_step is not None:
            on_step(t, state)

    return SampleStore(samples, accepted, cfg.burn_in, state, potentials)


# ------------------------------------------------------------------ samplers
def latent_energy(model: LatentVariableModel, x: np.ndarray, beta: float = 1.0) -> EnergyFn:
    """``z -> (beta * U(x, z), grad_z)`` for a single observation."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)

    def energy(z: np.ndarray):
        zt = Tensor(z.reshape(1, -1), requires_grad=True)
        with ad.frozen(model.parameters()):
            u = ad.tsum(model.potential(x, zt)) * beta
            ad.backward(u)
        return u.item(), zt.grad.reshape(z.shape)

    return energy


def ald_energy(model: LatentVariableModel, X: np.ndarray, G: np.ndarray, beta: float = 1.0) -> EnergyFn:
    """``Phi -> (beta * V(Phi), grad_Phi)`` with ``V = sum_i U(x_i, Phi g(x_i))``."""
    X = np.asarray(X, dtype=np.float64)

    def energy(phi: np.ndarray):
        pt = Tensor(phi, requires_grad=True)
        with ad.frozen(model.parameters()):
            Z = ad.matmul(G, ad.transpose(pt))
            v = ad.tsum(model.potential(X, Z)) * beta
            ad.backward(v)
        return v.item(), pt.grad

    return energy


def run_ld(model: LatentVariableModel, x, cfg: SamplerConfig, z0, noise: np.ndarray | None = None) -> SampleStore:
    """Datapoint-wise Langevin dynamics on the latent of a single observation."""
    z0 = np.asarray(z0, dtype=np.float64).reshape(-1)
    if z0.shape != (model.latent_dim,):
        raise ad.DimensionError("z0 does not match the latent dimension")
    energy = latent_energy(model, x, cfg.inverse_temperature)
    return run_chain(energy, z0, cfg, lambda z: z.reshape(1, -1), noise)


def run_ald(model: LatentVariableModel, X, encoder: AmortizedEncoder, cfg: SamplerConfig,
            noise: np.ndarray | None = None, on_step=None) -> SampleStore:
    """Amortized Langevin dynamics: sample Phi, record ``Phi @ g(x_i)`` for every i.

    The feature extractor stays fixed; on return ``encoder.phi`` holds the
    final state of the chain.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    check_capacity(encoder, X.shape[0])
    G = encoder.features(X).data.copy()
    energy = ald_energy(model, X, G, cfg.inverse_temperature)
    store = run_chain(energy, encoder.phi.data, cfg, lambda phi: G @ phi.T, noise, on_step=on_step)
    encoder.phi.data[...] = store.state.position
    store.extra["features"] = G
    return store


def warm_start_ld(model: LatentVariableModel, x_new, encoder: AmortizedEncoder, cfg: SamplerConfig,
                  noise: np.ndarray | None = None) -> SampleStore:
    """LD on a new observation initialized at the encoder's prediction."""
    x_new = np.asarray(x_new, dtype=np.float64).reshape(1, -1)
    z0 = encoder.encode(x_new).data.reshape(-1)
    return run_ld(model, x_new, cfg, z0, noise)


def _rowwise_energy(model: LatentVariableModel, X: np.ndarray, Z: np.ndarray):
    """Per-row potentials ``U(x_i, z_i)`` and their gradients in ``z_i``."""
    zt = Tensor(Z, requires_grad=True)
    with ad.frozen(model.parameters()):
        u = model.potential(X, zt)
        ad.backward(ad.tsum(u))
    return u.data.copy(), zt.grad


def batched_ld(model: LatentVariableModel, X, Z0, step_size: float, steps: int,
               rng: np.random.Generator, mh_correction: bool = True) -> tuple[np.ndarray, int]:
    """Independent per-datapoint Langevin chains advanced in lockstep.

    Row i of ``Z0`` starts the chain for ``X[i]``.  Each step draws one
    ``(n, d_z)`` noise block and, with MH on, one uniform per row; rows are
    accepted or rejected individually.  A proposal whose batch potential is
    non-finite is rejected for every row.

    Returns:
        ``(Z, n_accepted)`` with ``n_accepted`` summed over rows and steps.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    X = np.asarray(X, dtype=np.float64)
    Z = np.array(Z0, dtype=np.float64)
    if steps == 0:
        return Z, 0
    u, g = _rowwise_energy(model, X, Z)
    n_acc = 0
    for _ in range(steps):
        xi = rng.standard_normal(Z.shape)
        prop = langevin_propose(Z, g, step_size, xi)
        _check_divergence(prop)
        try:
            u_p, g_p = _rowwise_energy(model, X, prop)
        except ad.NonFiniteError:
            if mh_correction:
                rng.uniform(size=len(Z))
                continue
            raise SamplerError("potential became non-finite without MH correction")
        if mh_correction:
            r_fwd = prop - (Z - step_size * g)
            r_rev = Z - (prop - step_size * g_p)
            log_alpha = (u - u_p) + (np.sum(r_fwd ** 2, axis=1) - np.sum(r_rev ** 2, axis=1)) / (4.0 * step_size)
            ok = np.log(rng.uniform(size=len(Z))) < log_alpha
        else:
            ok = np.ones(len(Z), dtype=bool)
        Z = np.where(ok[:, None], prop, Z)
        u = np.where(ok, u_p, u)
        g = np.where(ok[:, None], g_p, g)
        n_acc += int(ok.sum())
    return Z, n_acc
