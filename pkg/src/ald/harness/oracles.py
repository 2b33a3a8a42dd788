"""Ground-truth posteriors: closed-form conjugate Gaussian and 2-D grid quadrature."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, frozen
from ..models import LatentVariableModel

DEFAULT_RESOLUTION = 200
HIST_BINS = 50


class OracleError(RuntimeError):
    pass


def _check_spd(m: np.ndarray, name: str) -> None:
    if not np.allclose(m, m.T, atol=1e-12) or np.any(np.linalg.eigvalsh(m) <= 0):
        raise ValueError(f"{name} must be symmetric positive definite")


@dataclass
class ConjugateOracle:
    """Exact posterior of ``z ~ N(mu_z, Sigma_z), x | z ~ N(z + offset, Sigma_x)``."""

    mu_z: np.ndarray
    sigma_z: np.ndarray
    sigma_x: np.ndarray
    offset: np.ndarray | None = None

    def __post_init__(self):
        self.mu_z = np.asarray(self.mu_z, dtype=np.float64)
        self.sigma_z = np.asarray(self.sigma_z, dtype=np.float64)
        self.sigma_x = np.asarray(self.sigma_x, dtype=np.float64)
        self.offset = np.zeros_like(self.mu_z) if self.offset is None else np.asarray(self.offset, dtype=np.float64)
        _check_spd(self.sigma_z, "Sigma_z")
        _check_spd(self.sigma_x, "Sigma_x")
        prec_z = np.linalg.inv(self.sigma_z)
        prec_x = np.linalg.inv(self.sigma_x)
        self.post_cov = np.linalg.inv(prec_z + prec_x)
        self._prec_z_mu = prec_z @ self.mu_z
        self._prec_x = prec_x

    @classmethod
    def from_model(cls, model: LatentVariableModel) -> "ConjugateOracle":
        lik = model.likelihood
        return cls(model.prior.mean, model.prior.cov, lik.cov, lik.offset.data.copy())

    def posterior(self, x) -> tuple[np.ndarray, np.ndarray]:
        """(mean, covariance) of ``p(z | x)``."""
        x = np.asarray(x, dtype=np.float64) - self.offset
        mean = self.post_cov @ (self._prec_z_mu + self._prec_x @ x)
        return mean, self.post_cov.copy()

    def log_evidence(self, x) -> float:
        """``log p(x)`` with ``x ~ N(mu_z, Sigma_z + Sigma_x)``."""
        x = np.asarray(x, dtype=np.float64) - self.offset
        cov = self.sigma_z + self.sigma_x
        r = x - self.mu_z
        sign, logdet = np.linalg.slogdet(2 * np.pi * cov)
        return float(-0.5 * (logdet + r @ np.linalg.solve(cov, r)))

    def target(self, x, width: float = 5.0) -> "GaussianTarget":
        mean, cov = self.posterior(x)
        return GaussianTarget(mean, cov, width)


class GaussianTarget:
    """A 2-D Gaussian exposing the same queries as :class:`GridOracle`.

    Histogram bin masses are integrated with a fine midpoint rule on
    ``mean +- width * std`` bounds.
    """

    def __init__(self, mean, cov, width: float = 5.0):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        sd = np.sqrt(np.diag(self.cov))
        self.bounds = ((self.mean[0] - width * sd[0], self.mean[0] + width * sd[0]),
                       (self.mean[1] - width * sd[1], self.mean[1] + width * sd[1]))
        prec = np.linalg.inv(self.cov)
        self._grid = tabulate_grid(
            lambda Z: -0.5 * np.einsum("ij,jk,ik->i", Z - self.mean, prec, Z - self.mean),
            self.bounds, resolution=HIST_BINS * 8)

    def histogram(self, bins: int = HIST_BINS):
        return self._grid.histogram(bins)


class GridOracle:
    """Normalized cell masses of an unnormalized 2-D log-density on a regular grid."""

    def __init__(self, bounds, resolution: int, log_density: np.ndarray):
        self.bounds = tuple(tuple(map(float, b)) for b in bounds)
        self.resolution = int(resolution)
        self.log_density = log_density
        top = np.max(log_density)
        if not np.isfinite(top):
            raise OracleError("grid carries no probability mass; bounds miss the posterior")
        weights = np.exp(log_density - top)
        total = weights.sum()
        self.mass = weights / total
        (x0, x1), (y0, y1) = self.bounds
        self.xs = x0 + (np.arange(self.resolution) + 0.5) * (x1 - x0) / self.resolution
        self.ys = y0 + (np.arange(self.resolution) + 0.5) * (y1 - y0) / self.resolution

    @property
    def mean(self) -> np.ndarray:
        return np.array([np.sum(self.mass.sum(axis=1) * self.xs), np.sum(self.mass.sum(axis=0) * self.ys)])

    @property
    def cov(self) -> np.ndarray:
        mx, my = self.mean
        dx = self.xs[:, None] - mx
        dy = self.ys[None, :] - my
        cxx = np.sum(self.mass * dx * dx)
        cyy = np.sum(self.mass * dy * dy)
        cxy = np.sum(self.mass * dx * dy)
        return np.array([[cxx, cxy], [cxy, cyy]])

    def histogram(self, bins: int = HIST_BINS):
        """Aggregate cell masses into a ``bins x bins`` histogram over the same bounds.

        Returns ``(mass, x_edges, y_edges)``; ``bins`` must divide the resolution.
        """
        if self.resolution % bins:
            raise ValueError(f"{bins} bins do not divide resolution {self.resolution}")
        k = self.resolution // bins
        mass = self.mass.reshape(bins, k, bins, k).sum(axis=(1, 3))
        (x0, x1), (y0, y1) = self.bounds
        return mass, np.linspace(x0, x1, bins + 1), np.linspace(y0, y1, bins + 1)

    def kl_from_samples(self, samples: np.ndarray, bins: int = HIST_BINS, eps: float = 1e-12) -> float:
        """KL(oracle histogram || sample histogram) with ``eps`` smoothing."""
        p, xe, ye = self.histogram(bins)
        h, _, _ = np.histogram2d(samples[:, 0], samples[:, 1], bins=[xe, ye])
        q = (h + eps) / (h + eps).sum()
        return float(np.sum(p * (np.log(p + eps) - np.log(q))))


def tabulate_grid(log_density, bounds, resolution: int = DEFAULT_RESOLUTION) -> GridOracle:
    """Tabulate ``log_density`` (a function of ``(N, 2)`` points) at cell centres."""
    (x0, x1), (y0, y1) = bounds
    if not (x1 > x0 and y1 > y0):
        raise ValueError("grid bounds must be increasing")
    xs = x0 + (np.arange(resolution) + 0.5) * (x1 - x0) / resolution
    ys = y0 + (np.arange(resolution) + 0.5) * (y1 - y0) / resolution
    XX, YY = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([XX.ravel(), YY.ravel()], axis=1)
    logd = np.asarray(log_density(pts), dtype=np.float64).reshape(resolution, resolution)
    # cell area is constant, so it cancels on normalization
    return GridOracle(bounds, resolution, logd)


def model_log_density(model: LatentVariableModel, x, chunk: int = 20000):
    """``Z -> -U(x, z)`` evaluated row-wise without recording gradients."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)

    def logd(Z: np.ndarray) -> np.ndarray:
        out = np.empty(len(Z))
        with frozen(model.parameters()):
            for s in range(0, len(Z), chunk):
                zc = Z[s:s + chunk]
                out[s:s + chunk] = -model.potential(np.repeat(x, len(zc), axis=0), Tensor(zc)).data
        return out

    return logd


def build_grid_oracle(model: LatentVariableModel, x, bounds=None,
                      resolution: int = DEFAULT_RESOLUTION) -> GridOracle:
    """Grid oracle of ``p(z | x)`` for a model with a 2-D latent.

    Without explicit bounds a conjugate model uses the exact posterior mean
    +- 5 standard deviations; other models default to ``[-4, 4]^2``.
    """
    if model.latent_dim != 2:
        raise ValueError("grid oracle needs a 2-D latent")
    if bounds is None:
        if hasattr(model.likelihood, "cov"):
            mean, cov = ConjugateOracle.from_model(model).posterior(x)
            sd = np.sqrt(np.diag(cov))
            bounds = ((mean[0] - 5 * sd[0], mean[0] + 5 * sd[0]), (mean[1] - 5 * sd[1], mean[1] + 5 * sd[1]))
        else:
            bounds = ((-4.0, 4.0), (-4.0, 4.0))
    return tabulate_grid(model_log_density(model, x), bounds, resolution)
