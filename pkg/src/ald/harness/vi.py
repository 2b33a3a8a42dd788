"""Per-datapoint Gaussian variational fits used as comparison baselines.

``family="diagonal"`` is mean-field VI; ``family="full"`` learns a Cholesky
factor whose diagonal is kept positive through an exponential.  Both are
fitted by reparameterized ELBO ascent with Adam on the model's joint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..models import LatentVariableModel
from ..optim import Adam

FAMILIES = ("diagonal", "full")


@dataclass
class VIFit:
    family: str
    means: np.ndarray
    chols: np.ndarray
    elbo_trace: np.ndarray

    @property
    def covs(self) -> np.ndarray:
        return self.chols @ np.swapaxes(self.chols, 1, 2)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """``(size, n, d_z)`` draws from every fitted Gaussian."""
        eps = rng.standard_normal((size, *self.means.shape))
        return self.means + np.einsum("nij,snj->sni", self.chols, eps)


def fit_gaussian_vi(model: LatentVariableModel, X, family: str = "diagonal", *,
                    iterations: int = 2000, mc_samples: int = 32, lr: float = 0.05,
                    rng: np.random.Generator | None = None, init_mean=None) -> VIFit:
    """Fit ``q_i(z) = N(m_i, L_i L_i^T)`` to ``p(z | x_i)`` for every row of ``X``."""
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}")
    rng = np.random.default_rng(0) if rng is None else rng
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, dz = len(X), model.latent_dim
    mean = Tensor(np.zeros((n, dz)) if init_mean is None else np.array(init_mean, dtype=np.float64),
                  requires_grad=True)
    eye = np.eye(dz)
    if family == "diagonal":
        raw = Tensor(np.zeros((n, dz)), requires_grad=True)
    else:
        raw = Tensor(np.zeros((n, dz, dz)), requires_grad=True)
    lower = np.tril(np.ones((dz, dz)), -1)
    opt = Adam([mean, raw], lr)
    Xrep = np.tile(X, (mc_samples, 1))
    trace = np.empty(iterations)

    def chol() -> Tensor:
        if family == "diagonal":
            return ad.exp(raw)
        return raw * lower + ad.exp(raw * eye) * eye

    with ad.frozen(model.parameters()):
        for it in range(iterations):
            eps = rng.standard_normal((mc_samples, n, dz))
            L = chol()
            if family == "diagonal":
                Z = ad.reshape(mean + L * eps, (mc_samples * n, dz))
                log_det = ad.tsum(raw)
            else:
                # z_s,i = m_i + L_i eps_s,i, expanded as a sum over columns of L_i
                cols = [ad.reshape(ad.take(L, (slice(None), slice(None), j)), (1, n, dz)) * eps[:, :, j:j + 1]
                        for j in range(dz)]
                shift = cols[0]
                for c in cols[1:]:
                    shift = shift + c
                Z = ad.reshape(mean + shift, (mc_samples * n, dz))
                log_det = ad.tsum(ad.take(raw, (slice(None), np.arange(dz), np.arange(dz))))
            log_joint = ad.tsum(model.log_joint(Xrep, Z)) * (1.0 / mc_samples)
            elbo = log_joint + log_det
            loss = -elbo
            mean.grad = raw.grad = None
            ad.backward(loss)
            opt.step()
            trace[it] = elbo.item() / n + 0.5 * dz * (1.0 + math.log(2 * math.pi))
    L = chol().data
    chols = np.stack([np.diag(row) for row in L]) if family == "diagonal" else L
    return VIFit(family, mean.data.copy(), chols, trace)
