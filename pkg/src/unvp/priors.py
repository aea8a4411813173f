"""Class-conditional Gaussian priors in latent space.

``unvp``: fixed means ``c * (1, ..., 1)`` and identity covariance.
``eunvp``: learnable means ``gamma * G_m(c) + lam * H_m(n)`` and diagonal
covariances ``exp(G_std(c))``, where ``n`` is a standard-normal noise draw.
"""
from __future__ import annotations

import numpy as np

from .nn import Linear, Module
from .numeric import Tensor, as_tensor

LOG_2PI = float(np.log(2.0 * np.pi))
MODES = ("unvp", "eunvp")


def gaussian_log_prob(z, mu, var) -> Tensor:
    """Diagonal-Gaussian log-density, summed over the last axis."""
    z, mu, var = as_tensor(z), as_tensor(mu), as_tensor(var)
    if np.any(var.data <= 0):
        raise ValueError("variances must be strictly positive")
    diff = z - mu
    per_coord = (diff * diff) / var + var.log() + LOG_2PI
    return per_coord.sum(axis=-1) * -0.5


class ClassPriorSet(Module):
    def __init__(
        self,
        n_classes: int,
        dim: int,
        mode: str = "unvp",
        gamma: float = 1.0,
        lam: float = 0.1,
        noise_dim: int | None = None,
        hidden: int = 32,
        rng: np.random.Generator | None = None,
    ):
        if mode not in MODES:
            raise ValueError(f"prior mode must be one of {MODES}, got {mode!r}")
        if gamma < 0 or lam < 0:
            raise ValueError("gamma and lambda must be non-negative")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mode = mode
        self.n_classes = int(n_classes)
        self.dim = int(dim)
        self.gamma = float(gamma)
        self.lam = float(lam)
        self.noise_dim = int(noise_dim if noise_dim is not None else min(dim, 32))
        self.hidden = hidden
        if mode == "eunvp":
            # starts from the fixed unvp layout, then learns
            self.mean_table = Tensor(np.outer(np.arange(n_classes), np.ones(dim)), requires_grad=True)
            self.logvar_table = Tensor(np.zeros((n_classes, dim)), requires_grad=True)
            self.shift_in = Linear(self.noise_dim, hidden, rng)
            self.shift_out = Linear(hidden, dim, rng)
            self.shift_out.weight.data *= 0.1

    def descriptor(self) -> dict:
        return {
            "mode": self.mode,
            "n_classes": self.n_classes,
            "dim": self.dim,
            "gamma": self.gamma,
            "lam": self.lam,
            "noise_dim": self.noise_dim,
            "hidden": self.hidden,
        }

    def _check_labels(self, c) -> np.ndarray:
        labels = np.atleast_1d(np.asarray(c))
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"class label out of range [0, {self.n_classes})")
        return labels.astype(np.int64)

    def shift(self, n) -> Tensor:
        return self.shift_out(self.shift_in(as_tensor(np.atleast_2d(n))).relu())

    def prior_params(self, c, n=None) -> tuple[Tensor, Tensor]:
        """(mean, variance) rows for labels ``c``; ``n=None`` means zero noise."""
        labels = self._check_labels(c)
        if self.mode == "unvp":
            mu = np.outer(labels, np.ones(self.dim)).astype(np.float64)
            return Tensor(mu), Tensor(np.ones_like(mu))
        mu = self.mean_table[labels] * self.gamma
        if self.lam:
            noise = np.zeros(self.noise_dim) if n is None else np.asarray(n, dtype=np.float64)
            mu = mu + self.shift(noise) * self.lam
        return mu, self.logvar_table[labels].exp()

    def log_prob(self, z, c, n=None) -> Tensor:
        mu, var = self.prior_params(c, n)
        return gaussian_log_prob(z, mu, var)

    def sample_noise(self, rng: np.random.Generator) -> np.ndarray:
        if self.mode != "eunvp":
            raise ValueError("noise is only defined for eunvp priors")
        return rng.standard_normal(self.noise_dim)

    def sample(self, c, rng: np.random.Generator) -> np.ndarray:
        mu, var = self.prior_params(c)
        return mu.data + np.sqrt(var.data) * rng.standard_normal(mu.shape)


def prior_params(priors: ClassPriorSet, c: int, n=None) -> tuple[np.ndarray, np.ndarray]:
    mu, var = priors.prior_params(c, n)
    return mu.data[0], var.data[0]


def sample_noise(priors: ClassPriorSet, seed: int) -> np.ndarray:
    return priors.sample_noise(np.random.default_rng(seed))
