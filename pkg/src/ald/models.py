"""Latent-variable models: priors, likelihoods and the potential energy.

All log-densities accept either a single latent vector (returning a scalar
tensor) or a batch of row vectors (returning one value per row).  The
potential of a model is the negative joint log-density,
``U(x, z) = -(log p(z) + log p(x | z))``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, MLPSpec, Module

LOG_2PI = math.log(2.0 * math.pi)
PIXEL_HALF_WIDTH = 1.0 / 255.0


class DomainError(ValueError):
    """Raised when an observation lies outside a likelihood's support."""


def _spd_cholesky(cov: np.ndarray, name: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ad.DimensionError(f"{name} must be square, got {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
        raise ValueError(f"{name} is not symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} is not positive definite") from None


def _batched(z) -> tuple[Tensor, bool]:
    z = ad.as_tensor(z)
    if z.ndim == 1:
        return ad.reshape(z, (1, z.shape[0])), True
    if z.ndim != 2:
        raise ad.DimensionError(f"expected a vector or a batch of row vectors, got {z.shape}")
    return z, False


def _finish(values: Tensor, single: bool) -> Tensor:
    return ad.tsum(values) if single else values


class _CholeskyGaussian:
    """Log-density of N(0, cov) evaluated through triangular solves."""

    def __init__(self, cov: np.ndarray, name: str):
        self.cov = np.asarray(cov, dtype=np.float64)
        self.chol = _spd_cholesky(self.cov, name)
        self.dim = self.cov.shape[0]
        # whitening map applied to row vectors: w = r @ L^{-T}
        self._whiten = solve_triangular(self.chol, np.eye(self.dim), lower=True).T
        self._const = -0.5 * (self.dim * LOG_2PI + 2.0 * np.sum(np.log(np.diag(self.chol))))

    def logpdf_rows(self, r: Tensor) -> Tensor:
        w = ad.matmul(r, self._whiten)
        return ad.tsum(ad.square(w), axis=1) * -0.5 + self._const


class GaussianPrior:
    """``p(z) = N(mean, cov)``."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64)
        self._gauss = _CholeskyGaussian(cov, "prior covariance")
        if self.mean.shape != (self._gauss.dim,):
            raise ad.DimensionError("prior mean and covariance disagree in dimension")
        self.cov = self._gauss.cov

    @classmethod
    def standard(cls, dim: int) -> "GaussianPrior":
        return cls(np.zeros(dim), np.eye(dim))

    @property
    def dim(self) -> int:
        return self._gauss.dim

    def log_prob(self, z) -> Tensor:
        zb, single = _batched(z)
        if zb.shape[1] != self.dim:
            raise ad.DimensionError(f"latent has dimension {zb.shape[1]}, prior expects {self.dim}")
        return _finish(self._gauss.logpdf_rows(zb - self.mean), single)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + rng.standard_normal((n, self.dim)) @ self._gauss.chol.T


class Likelihood(Module):
    latent_dim: int
    obs_dim: int

    def log_prob(self, x, z: Tensor) -> Tensor:  # pragma: no cover - interface
        raise NotImplementedError

    def regularizer(self):
        return 0.0


class GaussianLinearLikelihood(Likelihood):
    """``p(x | z) = N(z + offset, cov)``.

    The offset is fixed at zero unless ``learn_offset`` is set, in which case
    it is the likelihood's only trainable parameter.
    """

    def __init__(self, cov, learn_offset: bool = False):
        self._gauss = _CholeskyGaussian(cov, "observation covariance")
        self.cov = self._gauss.cov
        self.latent_dim = self.obs_dim = self._gauss.dim
        self.offset = Tensor(np.zeros(self.obs_dim), requires_grad=learn_offset)

    def log_prob(self, x, z: Tensor) -> Tensor:
        return self._gauss.logpdf_rows(ad.as_tensor(x) - z - self.offset)


class NeuralGaussianLikelihood(Likelihood):
    """``p(x | z) = N(decoder(z), sigma^2 I)``."""

    def __init__(self, decoder: MLP, sigma: float):
        if sigma <= 0:
            raise ValueError("observation std must be positive")
        self.decoder = decoder
        self.sigma = float(sigma)
        self.latent_dim = decoder.spec.n_in
        self.obs_dim = decoder.spec.n_out

    @classmethod
    def random(cls, rng: np.random.Generator, latent_dim: int = 2, obs_dim: int = 2, *,
               hidden=(128, 128, 128), weight_std: float = 0.2, bias_std: float = 0.1,
               sigma: float = 0.25) -> "NeuralGaussianLikelihood":
        """Randomly initialized four-layer ReLU decoder with fixed Gaussian weight and bias scales."""
        spec = MLPSpec(latent_dim, hidden, obs_dim, weight_std=weight_std, bias_std=bias_std)
        return cls(MLP(spec, rng), sigma)

    def log_prob(self, x, z: Tensor) -> Tensor:
        r = (ad.as_tensor(x) - self.decoder(z)) * (1.0 / self.sigma)
        const = -0.5 * self.obs_dim * (LOG_2PI + 2.0 * math.log(self.sigma))
        return ad.tsum(ad.square(r), axis=1) * -0.5 + const


def check_pixel_grid(x: np.ndarray) -> None:
    """Raise :class:`DomainError` unless every value is ``2k/255 - 1`` for integer k in [0, 255]."""
    k = (np.asarray(x, dtype=np.float64) + 1.0) * 127.5
    if np.any(np.abs(k - np.round(k)) > 1e-6) or np.any(k < -1e-6) or np.any(k > 255 + 1e-6):
        raise DomainError("observation is not on the 256-level pixel grid in [-1, 1]")


def pixels_to_unit(values: np.ndarray) -> np.ndarray:
    """Map integer intensities {0..255} to grid values in [-1, 1]."""
    return 2.0 * np.asarray(values, dtype=np.float64) / 255.0 - 1.0


def scale_from_pre(b) -> Tensor:
    """Logistic scale ``s = softplus(b) ** -1/2``."""
    return ad.power(ad.softplus(b), -0.5)


def scale_regularizer(b, m: int) -> Tensor:
    """``(b + 2 softplus(-b)) / m``: a standard-logistic prior on ``b`` spread over m examples."""
    if m < 1:
        raise ValueError("m must be a positive integer")
    b = ad.as_tensor(b)
    return (b + ad.softplus(-b) * 2.0) * (1.0 / m)


def discretized_logistic_logprob(x: np.ndarray, mu: Tensor, inv_scale: Tensor) -> Tensor:
    """Per-element log-probability of the 8-bit bin containing ``x``.

    Interior bins use the exact identity
    ``sig(p) - sig(m) = sig(p) * sig(-m) * (1 - exp(-(p - m)))`` so that the
    result stays finite even when the bin mass underflows in linear space.
    """
    x = np.asarray(x, dtype=np.float64)
    centered = ad.as_tensor(x) - mu
    plus = (centered + PIXEL_HALF_WIDTH) * inv_scale
    minus = (centered - PIXEL_HALF_WIDTH) * inv_scale
    log_cdf_plus = ad.log_sigmoid(plus)
    log_sf_minus = ad.log_sigmoid(-minus)
    log_width = ad.log1mexp(inv_scale * (2.0 * PIXEL_HALF_WIDTH))
    low = np.isclose(x, -1.0, rtol=0, atol=1e-9)
    high = np.isclose(x, 1.0, rtol=0, atol=1e-9)
    mid = ~(low | high)
    interior = log_cdf_plus + log_sf_minus + log_width
    return interior * mid.astype(float) + log_cdf_plus * low.astype(float) + log_sf_minus * high.astype(float)


class DiscretizedLogisticLikelihood(Likelihood):
    """Factorized 8-bit discretized logistic likelihood with a shared learned scale.

    Attributes:
        decoder: maps latents to per-pixel locations.
        b: scalar pre-parameter; the logistic scale is ``softplus(b) ** -1/2``.
        m: number of training examples (weights the regularizer on ``b``).
    """

    def __init__(self, decoder: MLP, m: int, b_init: float = 0.0):
        self.decoder = decoder
        self.b = Tensor(float(b_init), requires_grad=True)
        self.m = int(m)
        self.latent_dim = decoder.spec.n_in
        self.obs_dim = decoder.spec.n_out

    @classmethod
    def build(cls, rng: np.random.Generator, latent_dim: int, obs_dim: int, m: int, *,
              hidden=(1024, 1024, 1024), b_init: float = 0.0) -> "DiscretizedLogisticLikelihood":
        spec = MLPSpec(latent_dim, hidden, obs_dim, layer_norm=True)
        return cls(MLP(spec, rng), m, b_init)

    @property
    def scale(self) -> float:
        return float(scale_from_pre(self.b).item())

    def log_prob(self, x, z: Tensor) -> Tensor:
        check_pixel_grid(x)
        inv_scale = ad.power(ad.softplus(self.b), 0.5)
        return ad.tsum(discretized_logistic_logprob(x, self.decoder(z), inv_scale), axis=1)

    def regularizer(self):
        return scale_regularizer(self.b, self.m)


class LatentVariableModel:
    """A Gaussian prior paired with a likelihood."""

    def __init__(self, prior: GaussianPrior, likelihood: Likelihood):
        if prior.dim != likelihood.latent_dim:
            raise ad.DimensionError("prior and likelihood disagree on the latent dimension")
        self.prior = prior
        self.likelihood = likelihood

    @property
    def latent_dim(self) -> int:
        return self.prior.dim

    @property
    def obs_dim(self) -> int:
        return self.likelihood.obs_dim

    def parameters(self) -> list[Tensor]:
        return self.likelihood.parameters()

    def named_parameters(self):
        return self.likelihood.named_parameters()

    def log_prior(self, z) -> Tensor:
        return self.prior.log_prob(z)

    def log_likelihood(self, x, z) -> Tensor:
        zb, single = _batched(z)
        xb = np.atleast_2d(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64))
        if xb.shape != (zb.shape[0], self.obs_dim):
            raise ad.DimensionError(f"observations {xb.shape} do not match latents {zb.shape}")
        return _finish(self.likelihood.log_prob(xb, zb), single)

    def log_joint(self, x, z) -> Tensor:
        return self.log_prior(z) + self.log_likelihood(x, z)

    def potential(self, x, z) -> Tensor:
        """``U(x, z) = -log p(x, z)``, one value per row for batched input."""
        return -self.log_joint(x, z)

    def regularizer(self):
        return self.likelihood.regularizer()


def conjugate_gaussian_model(mu_z, sigma_z, sigma_x, learn_offset: bool = False) -> LatentVariableModel:
    return LatentVariableModel(GaussianPrior(mu_z, sigma_z), GaussianLinearLikelihood(sigma_x, learn_offset))


# Default observation covariance of the bivariate conjugate toy (symmetric, det 0.2).
TOY_SIGMA_X = np.array([[0.7, 0.6], [0.6, 0.8]])
