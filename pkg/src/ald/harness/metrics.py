"""Sample-quality metrics against an oracle posterior."""

from __future__ import annotations

import numpy as np

from ..samplers import SampleStore
from .oracles import HIST_BINS

MIN_SAMPLES = 100


class InsufficientSamplesError(ValueError):
    pass


def histogram_tv(samples: np.ndarray, target, bins: int = HIST_BINS) -> float:
    """Total-variation distance between a sample histogram and the target's bin masses.

    Samples falling outside the target's bounds count as mass the target
    does not have.
    """
    p, xe, ye = target.histogram(bins)
    h, _, _ = np.histogram2d(samples[:, 0], samples[:, 1], bins=[xe, ye])
    q = h / len(samples)
    outside = 1.0 - q.sum()
    return float(0.5 * (np.abs(p - q).sum() + outside))


def sample_metrics(samples, target) -> dict:
    """Mean error (l2), covariance Frobenius error and histogram TV for one datapoint.

    Args:
        samples: ``(N, d_z)`` post-burn-in draws, ``N >= 100``.
        target: a :class:`~ald.harness.oracles.GridOracle` or
            :class:`~ald.harness.oracles.GaussianTarget`.  ``hist_tv`` is only
            reported for 2-D latents.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or len(samples) < MIN_SAMPLES:
        raise InsufficientSamplesError(f"need at least {MIN_SAMPLES} samples, got {len(samples)}")
    mean = samples.mean(axis=0)
    cov = np.atleast_2d(np.cov(samples.T, bias=False))
    out = {
        "mean_err": float(np.linalg.norm(mean - target.mean)),
        "cov_frob_err": float(np.linalg.norm(cov - target.cov)),
        "sample_cov_det": float(np.linalg.det(cov)),
        "target_cov_det": float(np.linalg.det(target.cov)),
    }
    out["hist_tv"] = histogram_tv(samples, target) if samples.shape[1] == 2 else float("nan")
    return out


def store_metrics(store: SampleStore, targets) -> list[dict]:
    """Per-datapoint :func:`sample_metrics` over the usable part of a store."""
    return [sample_metrics(store.usable(i), t) for i, t in enumerate(targets)]


def batch_means_se(series: np.ndarray, n_batches: int = 20) -> np.ndarray:
    """Monte Carlo standard error of the mean of a correlated series (batch means)."""
    series = np.asarray(series, dtype=np.float64)
    usable = len(series) - len(series) % n_batches
    batches = series[:usable].reshape(n_batches, -1, *series.shape[1:]).mean(axis=1)
    return batches.std(axis=0, ddof=1) / np.sqrt(n_batches)
