"""Amortized encoder ``f(x) = Phi @ g(x; psi)`` and the feature-rank diagnostic.

Only ``Phi`` (a ``d_z x d`` matrix, no bias, no output activation) follows
the Langevin dynamics; the feature extractor ``g`` is held fixed while
sampling.  The induced latent chain targets the exact per-datapoint
posteriors whenever the minibatch feature matrix ``G`` (rows ``g(x_i)``) has
full row rank.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, MLPSpec, Module

RANK_TOL = 1e-10


class OneHotFeatures(Module):
    """Fixed extractor mapping the i-th row of a batch to ``one-hot(i)`` in ``R^d``.

    With ``d == n`` the encoder's latent for datapoint i is column i of Phi.
    """

    def __init__(self, d: int):
        self.d = int(d)

    def __call__(self, X) -> Tensor:
        n = np.shape(X.data if isinstance(X, Tensor) else X)[0]
        if n > self.d:
            raise ad.DimensionError(f"one-hot features need d >= n (d={self.d}, n={n})")
        return Tensor(np.eye(n, self.d))


def default_feature_spec(obs_dim: int, d: int = 128, hidden=(128,), *,
                         layer_norm: bool = True, output_gain: float = 1.0) -> MLPSpec:
    """Feature extractor used by the toy experiments.

    Hidden layers are Linear -> LayerNorm -> ReLU; the last hidden
    representation is layer-normalized again before the final linear map to
    ``d`` features.  The output layer has no activation, so ``g`` has no
    constant-1 feature and the encoder stays exactly linear in Phi.
    """
    return MLPSpec(obs_dim, tuple(hidden), d, layer_norm=layer_norm,
                   output_layer_norm=layer_norm, output_gain=output_gain)


class AmortizedEncoder(Module):
    """Deterministic encoder whose last linear layer ``phi`` is the sampled state.

    Attributes:
        features: callable feature extractor ``g`` (an :class:`MLP` or
            :class:`OneHotFeatures`).
        phi: ``d_z x d`` tensor.
    """

    def __init__(self, features, latent_dim: int, d: int, phi: np.ndarray | None = None):
        self.features_net = features
        self.latent_dim = int(latent_dim)
        self.d = int(d)
        init = np.zeros((latent_dim, d)) if phi is None else np.asarray(phi, dtype=np.float64)
        if init.shape != (latent_dim, d):
            raise ad.DimensionError(f"phi must be {latent_dim}x{d}, got {init.shape}")
        self.phi = Tensor(init, requires_grad=True)

    @classmethod
    def mlp(cls, obs_dim: int, latent_dim: int, rng: np.random.Generator, d: int = 128,
            hidden=(128,), *, layer_norm: bool = True, output_gain: float = 1.0,
            phi_std: float = 0.0) -> "AmortizedEncoder":
        net = MLP(default_feature_spec(obs_dim, d, hidden, layer_norm=layer_norm,
                                       output_gain=output_gain), rng)
        phi = rng.standard_normal((latent_dim, d)) * phi_std
        return cls(net, latent_dim, d, phi)

    @classmethod
    def one_hot(cls, n: int, latent_dim: int, phi: np.ndarray | None = None) -> "AmortizedEncoder":
        return cls(OneHotFeatures(n), latent_dim, n, phi)

    def feature_parameters(self) -> list[Tensor]:
        return self.features_net.parameters() if isinstance(self.features_net, Module) else []

    def features(self, X) -> Tensor:
        """Feature matrix ``G`` with ``g(x_i)`` in row i (tape-connected to psi)."""
        X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ad.DimensionError(f"expected a non-empty batch of observations, got {X.shape}")
        G = self.features_net(X)
        if G.shape != (X.shape[0], self.d):
            raise ad.DimensionError(f"feature extractor produced {G.shape}, expected ({X.shape[0]}, {self.d})")
        return G

    def encode(self, X, phi: Tensor | None = None, G: Tensor | np.ndarray | None = None) -> Tensor:
        """Latents ``Z = G @ phi.T`` (row i is ``f(x_i)``).

        ``phi`` defaults to the encoder's own parameter; ``G`` may be passed
        in to reuse a feature matrix computed once per batch.
        """
        phi = self.phi if phi is None else ad.as_tensor(phi)
        G = self.features(X) if G is None else G
        return ad.matmul(G, ad.transpose(phi))

    def __call__(self, X) -> Tensor:
        return self.encode(X)


@dataclass(frozen=True)
class RankReport:
    rank: int
    satisfied: bool
    singular_values: np.ndarray


def rank_diagnostic(G, tol: float = RANK_TOL) -> RankReport:
    """Numerical rank of G (singular values above ``tol * sigma_max``); satisfied iff rank == n."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    G = np.asarray(G.data if isinstance(G, Tensor) else G, dtype=np.float64)
    sv = np.linalg.svd(G, compute_uv=False)
    rank = int(np.sum(sv > tol * sv[0])) if sv.size and sv[0] > 0 else 0
    return RankReport(rank, rank == G.shape[0], sv)


def check_capacity(encoder: AmortizedEncoder, batch_size: int) -> None:
    """Warn when d < n: the feature matrix cannot have full row rank."""
    if encoder.d < batch_size:
        warnings.warn(
            f"encoder feature dimension d={encoder.d} is smaller than the batch size n={batch_size}; "
            "the sampled latents will not follow the per-datapoint posteriors",
            stacklevel=2,
        )
