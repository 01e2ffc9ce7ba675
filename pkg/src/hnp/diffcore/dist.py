"""Diagonal Gaussians: reparameterized sampling, closed-form KL, log-density."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, log, softplus

SIGMA_FLOOR = 1e-4
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GaussianDiag:
    """Diagonal Gaussian over the last axis. ``sigma`` is a standard deviation."""

    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        self.mu = as_tensor(self.mu)
        self.sigma = as_tensor(self.sigma)
        if self.mu.shape != self.sigma.shape:
            raise DimensionError(f"mu {self.mu.shape} and sigma {self.sigma.shape} differ")

    @property
    def shape(self):
        return self.mu.shape


def positive_scale(pre: Tensor, floor: float = SIGMA_FLOOR) -> Tensor:
    return softplus(pre) + floor


def reparam_sample(q: GaussianDiag, rng: np.random.Generator, n: int | None = None) -> Tensor:
    """Draw ``mu + sigma * eps``. With ``n`` set, a new axis of n samples is
    inserted just before the last (event) axis."""
    mu, sigma = q.mu, q.sigma
    if n is not None:
        mu = mu.unsqueeze(-2)
        sigma = sigma.unsqueeze(-2)
        shape = q.shape[:-1] + (n, q.shape[-1])
    else:
        shape = q.shape
    eps = rng.standard_normal(shape).astype(q.mu.dtype, copy=False)
    return mu + sigma * eps


def kl_diag_gaussian(q: GaussianDiag, p: GaussianDiag) -> Tensor:
    """KL(q || p) summed over the last axis (leading axes are kept)."""
    if q.shape != p.shape:
        raise DimensionError(f"KL between shapes {q.shape} and {p.shape}")
    ratio = q.sigma / p.sigma
    diff = (q.mu - p.mu) / p.sigma
    terms = ratio * ratio + diff * diff - 1.0 - 2.0 * log(ratio)
    return terms.sum(axis=-1) * 0.5


def gaussian_log_density(y, mean: Tensor, scale: Tensor) -> Tensor:
    """Elementwise log N(y; mean, scale^2)."""
    z = (as_tensor(y, mean.dtype) - mean) / scale
    return z * z * -0.5 - log(scale) - 0.5 * LOG_2PI
