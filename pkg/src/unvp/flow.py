"""Invertible flow: actnorm -> invertible mixing -> affine coupling, repeated.

Every block exposes ``forward(x) -> (y, logdet)`` on flattened ``(N, d)``
tensors and an exact ``inverse(y)`` on numpy arrays.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

from .nn import Module, ResidualMLP
from .numeric import Tensor, as_tensor, concat, no_grad
from .preprocessing import Preprocessor


class DegenerateDataError(ValueError):
    """A channel had zero variance where a scale had to be estimated."""


def _channels(input_shape: tuple) -> tuple[int, int]:
    """(channel count, positions per channel) for a flattened input."""
    if len(input_shape) == 1:
        return input_shape[0], 1
    c = input_shape[0]
    return c, int(np.prod(input_shape[1:]))


def coupling_mask(input_shape: tuple, index: int) -> np.ndarray:
    """Binary mask for coupling ``index``; polarity alternates block to block.

    Vectors use a first-half/second-half split. Images use a checkerboard,
    switching to a channel split on every other pair of blocks when there is
    more than one channel.
    """
    if len(input_shape) == 1:
        d = input_shape[0]
        if d < 2:
            raise ValueError("coupling needs at least 2 coordinates")
        b = np.zeros(d, dtype=bool)
        b[: (d + 1) // 2] = True
    else:
        c, h, w = input_shape
        if c > 1 and (index // 2) % 2 == 1:
            b = np.zeros(input_shape, dtype=bool)
            b[: (c + 1) // 2] = True
        else:
            ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            b = np.broadcast_to(((ii + jj) % 2 == 0), input_shape).copy()
        b = b.reshape(-1)
    return b if index % 2 == 0 else ~b


class ActNorm(Module):
    """Per-channel ``y = s * x + t`` with data-dependent initialization."""

    kind = "actnorm"

    def __init__(self, input_shape: tuple):
        self.input_shape = tuple(input_shape)
        c, self.positions = _channels(self.input_shape)
        self.log_scale = Tensor(np.zeros(c), requires_grad=True)
        self.bias = Tensor(np.zeros(c), requires_grad=True)
        self.initialized = False

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale.data)

    def _expand(self, t: Tensor) -> Tensor:
        if self.positions == 1:
            return t
        idx = np.repeat(np.arange(t.shape[0]), self.positions)
        return t[idx]

    def initialize(self, batch) -> None:
        x = np.asarray(batch, dtype=np.float64)
        if x.shape[0] < 2:
            raise DegenerateDataError("actnorm initialization needs at least 2 samples")
        c = self.log_scale.shape[0]
        per_channel = x.reshape(x.shape[0], c, self.positions).transpose(1, 0, 2).reshape(c, -1)
        mean = per_channel.mean(axis=1)
        std = per_channel.std(axis=1)
        if np.any(std <= 1e-12):
            raise DegenerateDataError(f"zero-variance channel(s) {np.flatnonzero(std <= 1e-12).tolist()}")
        self.log_scale.data[...] = -np.log(std)
        self.bias.data[...] = -mean / std
        self.initialized = True

    def forward(self, x: Tensor):
        if not self.initialized:
            raise RuntimeError("actnorm used before data-dependent initialization")
        s = self._expand(self.log_scale)
        y = x * s.exp() + self._expand(self.bias)
        logdet = self.log_scale.sum() * float(self.positions)
        return y, logdet

    def inverse(self, y: np.ndarray) -> np.ndarray:
        s = np.repeat(self.log_scale.data, self.positions)
        t = np.repeat(self.bias.data, self.positions)
        return (y - t) * np.exp(-s)


class InvertibleMix(Module):
    """Learned channel mixing ``W = P L (U + diag(sign * exp(log_s)))``.

    For vectors every coordinate is a channel; for images the same ``C x C``
    matrix is applied at each pixel (a 1x1 convolution).
    """

    kind = "mix"
    buffers = ("perm", "sign")

    def __init__(self, input_shape: tuple, rng: np.random.Generator):
        self.input_shape = tuple(input_shape)
        c, self.positions = _channels(self.input_shape)
        q, _ = np.linalg.qr(rng.normal(size=(c, c)))
        p, lower, upper = scipy.linalg.lu(q)
        diag = np.diag(upper)
        self.perm = p
        self.sign = np.sign(diag)
        self.lower_mask = np.tril(np.ones((c, c)), -1)
        self.upper_mask = np.triu(np.ones((c, c)), 1)
        self.lower = Tensor(lower * self.lower_mask, requires_grad=True)
        self.upper = Tensor(upper * self.upper_mask, requires_grad=True)
        self.log_s = Tensor(np.log(np.abs(diag)), requires_grad=True)

    def weight(self) -> Tensor:
        c = self.log_s.shape[0]
        eye = np.eye(c)
        lower = self.lower * self.lower_mask + eye
        upper = self.upper * self.upper_mask + eye * (self.log_s.exp() * self.sign)
        return as_tensor(self.perm) @ (lower @ upper)

    def weight_array(self) -> np.ndarray:
        with no_grad():
            return self.weight().data

    def forward(self, x: Tensor):
        w = self.weight()
        c = w.shape[0]
        if self.positions == 1:
            y = x @ w.T
        else:
            n = x.shape[0]
            cols = x.reshape(n, c, self.positions).transpose(0, 2, 1).reshape(n * self.positions, c)
            y = (cols @ w.T).reshape(n, self.positions, c).transpose(0, 2, 1).reshape(n, c * self.positions)
        return y, self.log_s.sum() * float(self.positions)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        w = self.weight_array()
        c = w.shape[0]
        n = y.shape[0]
        if self.positions == 1:
            return np.linalg.solve(w, y.T).T
        cols = y.reshape(n, c, self.positions).transpose(0, 2, 1).reshape(-1, c)
        x = np.linalg.solve(w, cols.T).T
        return x.reshape(n, self.positions, c).transpose(0, 2, 1).reshape(n, -1)


class AffineCoupling(Module):
    """``y = b*x + (1-b)*(x*exp(S(b*x)) + T(b*x))`` with S soft-clamped to (-c, c)."""

    kind = "coupling"

    def __init__(self, mask: np.ndarray, hidden: int, n_res_blocks: int, rng: np.random.Generator, clamp: float = 2.0):
        self.mask = np.asarray(mask, dtype=bool)
        self.kept = np.flatnonzero(self.mask)
        self.free = np.flatnonzero(~self.mask)
        if len(self.kept) == 0 or len(self.free) == 0:
            raise ValueError("mask must keep at least one coordinate and transform at least one")
        self.order = np.argsort(np.concatenate([self.kept, self.free]))
        self.clamp = clamp
        self.scale_net = ResidualMLP(len(self.kept), hidden, len(self.free), n_res_blocks, rng)
        self.shift_net = ResidualMLP(len(self.kept), hidden, len(self.free), n_res_blocks, rng)

    def _scale_shift(self, xa: Tensor):
        s = self.scale_net(xa)
        if self.clamp:
            s = s.soft_clamp(self.clamp)
        return s, self.shift_net(xa)

    def forward(self, x: Tensor):
        if x.shape[1] != self.mask.size:
            raise ValueError(f"expected {self.mask.size} coordinates, got {x.shape[1]}")
        xa = x[:, self.kept]
        xb = x[:, self.free]
        s, t = self._scale_shift(xa)
        yb = xb * s.exp() + t
        y = concat([xa, yb], axis=1)[:, self.order]
        return y, s.sum(axis=1)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape[1] != self.mask.size:
            raise ValueError(f"expected {self.mask.size} coordinates, got {y.shape[1]}")
        with no_grad():
            s, t = self._scale_shift(Tensor(y[:, self.kept]))
        x = y.copy()
        x[:, self.free] = (y[:, self.free] - t.data) * np.exp(-s.data)
        return x


class FlowModel(Module):
    """Single-scale flow of ``n_blocks`` (actnorm, mix, coupling) steps."""

    def __init__(
        self,
        input_shape,
        n_blocks: int = 8,
        hidden: int = 64,
        n_res_blocks: int = 3,
        clamp: float = 2.0,
        rng: np.random.Generator | None = None,
        preprocessor: Preprocessor | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_shape = tuple(int(s) for s in np.atleast_1d(input_shape))
        self.dim = int(np.prod(self.input_shape))
        self.n_blocks = n_blocks
        self.hidden = hidden
        self.n_res_blocks = n_res_blocks
        self.clamp = clamp
        self.preprocessor = preprocessor or Preprocessor()
        self.blocks: list = []
        for i in range(n_blocks):
            self.blocks.append(ActNorm(self.input_shape))
            self.blocks.append(InvertibleMix(self.input_shape, rng))
            self.blocks.append(AffineCoupling(coupling_mask(self.input_shape, i), hidden, n_res_blocks, rng, clamp))

    def descriptor(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "n_blocks": self.n_blocks,
            "hidden": self.hidden,
            "n_res_blocks": self.n_res_blocks,
            "clamp": self.clamp,
            "preprocessor": self.preprocessor.to_dict(),
            "kinds": [b.kind for b in self.blocks],
        }

    @property
    def initialized(self) -> bool:
        return all(b.initialized for b in self.blocks if isinstance(b, ActNorm))

    def initialize(self, batch) -> None:
        """Data-dependent actnorm initialization from a preprocessed batch."""
        h = np.asarray(batch, dtype=np.float64).reshape(len(batch), -1)
        with no_grad():
            for block in self.blocks:
                if isinstance(block, ActNorm) and not block.initialized:
                    block.initialize(h)
                h = block.forward(Tensor(h))[0].data

    def mark_initialized(self) -> None:
        for b in self.blocks:
            if isinstance(b, ActNorm):
                b.initialized = True

    def forward(self, x) -> tuple[Tensor, Tensor]:
        """Map preprocessed ``(N, d)`` inputs to latents; logdet per sample."""
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected input of shape (N, {self.dim}), got {x.shape}")
        logdet = Tensor(np.zeros(x.shape[0]))
        h = x
        for block in self.blocks:
            h, ld = block.forward(h)
            logdet = logdet + ld
        return h, logdet

    def inverse(self, z) -> np.ndarray:
        h = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
        for block in reversed(self.blocks):
            h = block.inverse(h)
        return h

    def encode(self, x_pre) -> np.ndarray:
        with no_grad():
            return self.forward(np.asarray(x_pre, dtype=np.float64))[0].data


def flow_forward(model: FlowModel, x_raw, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Raw inputs -> (latents, total logdet including the preprocessing constant)."""
    x = np.asarray(x_raw, dtype=np.float64).reshape(len(x_raw), -1)
    x_pre = model.preprocessor(x, rng)
    with no_grad():
        z, ld = model.forward(x_pre)
    return z.data, ld.data + model.preprocessor.logdet(model.dim)


def flow_inverse(model: FlowModel, z) -> np.ndarray:
    """Latents -> raw inputs (quantized data snaps back to its levels)."""
    return model.preprocessor.invert(model.inverse(z))


def log_likelihood(model: FlowModel, priors, x_raw, c, rng: np.random.Generator | None = None) -> np.ndarray:
    """log p_X(x, c) per sample under the flow and class-conditional priors."""
    labels = np.broadcast_to(np.asarray(c, dtype=np.int64), (len(x_raw),))
    z, ld = flow_forward(model, x_raw, rng)
    with no_grad():
        lp = priors.log_prob(Tensor(z), labels).data
    return lp + ld
