"""Input scaling to [-0.5, 0.5] with optional uniform dequantization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Preprocessor:
    """Affine map of a declared input range onto [-0.5, 0.5].

    ``levels`` is the number of quantization levels of the raw data
    (0 means continuous). Quantized inputs are snapped to their level and
    spread uniformly over the level's cell, one quantization step wide.
    """

    low: float = -0.5
    high: float = 0.5
    levels: int = 0

    def __post_init__(self):
        if not self.high > self.low:
            raise ValueError("input range must have high > low")
        if self.levels == 1 or self.levels < 0:
            raise ValueError("levels must be 0 (continuous) or >= 2")

    @property
    def step(self) -> float:
        """One quantization step in raw units (0 for continuous data)."""
        return 0.0 if self.levels == 0 else (self.high - self.low) / (self.levels - 1)

    def check_range(self, x: np.ndarray) -> None:
        x = np.asarray(x)
        tol = 1e-9 * (self.high - self.low)
        if x.size and (x.min() < self.low - tol or x.max() > self.high + tol):
            raise ValueError(f"input outside declared range [{self.low}, {self.high}]")

    def logdet(self, dim: int) -> float:
        """Constant log-Jacobian of the map, per sample of ``dim`` coordinates."""
        if self.levels:
            return -dim * float(np.log(self.levels))
        return -dim * float(np.log(self.high - self.low))

    def __call__(self, x_raw, rng: np.random.Generator | None = None) -> np.ndarray:
        """Preprocess; without ``rng`` quantized inputs map to their cell centre."""
        x = np.asarray(x_raw, dtype=np.float64)
        self.check_range(x)
        u = (x - self.low) / (self.high - self.low)
        if self.levels:
            k = np.clip(np.round(u * (self.levels - 1)), 0, self.levels - 1)
            noise = rng.random(x.shape) if rng is not None else 0.5
            u = (k + noise) / self.levels
        return u - 0.5

    def dequantize_noise(self, shape, rng: np.random.Generator) -> np.ndarray:
        """Offset that turns a cell-centre value into a uniform draw from its cell."""
        if not self.levels:
            return np.zeros(shape)
        return (rng.random(shape) - 0.5) / self.levels

    def invert(self, x_pre) -> np.ndarray:
        x = np.asarray(x_pre, dtype=np.float64) + 0.5
        if self.levels:
            k = np.clip(np.floor(x * self.levels), 0, self.levels - 1)
            x = k / (self.levels - 1)
        return x * (self.high - self.low) + self.low

    def to_dict(self) -> dict:
        return {"low": self.low, "high": self.high, "levels": self.levels}
