"""Small layer library on top of :mod:`unvp.numeric`."""
from __future__ import annotations

import numpy as np

from .numeric import Tensor, avg_pool2d, conv2d


class Module:
    """Parameter container; parameters and children are discovered in attribute order.

    Attribute names listed in ``buffers`` hold fixed numpy arrays that are
    saved and restored with the parameters but never trained.
    """

    buffers: tuple = ()

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((prefix + key, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(prefix + key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> list[tuple[str, "Module", str]]:
        out = [(prefix + name, self, name) for name in self.buffers]
        for key, val in vars(self).items():
            if isinstance(val, Module):
                out.extend(val.named_buffers(prefix + key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_buffers(f"{prefix}{key}.{i}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.named_parameters()}
        state.update({k: np.array(getattr(owner, name), dtype=np.float64) for k, owner, name in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {k: (owner, name) for k, owner, name in self.named_buffers()}
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data[...] = arr
        for k, (owner, name) in buffers.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != np.shape(getattr(owner, name)):
                raise ValueError(f"shape mismatch for {k}")
            setattr(owner, name, arr.copy())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class ResidualMLP(Module):
    """input -> hidden -> n_blocks residual blocks -> output, rectifier activations.

    With ``zero_out=True`` the output layer starts at zero, so the network
    initially returns zeros for any input.
    """

    def __init__(self, n_in: int, hidden: int, n_out: int, n_blocks: int, rng: np.random.Generator, zero_out: bool = True):
        self.inp = Linear(n_in, hidden, rng)
        self.blocks = [(Linear(hidden, hidden, rng), Linear(hidden, hidden, rng)) for _ in range(n_blocks)]
        self.block_layers = [layer for pair in self.blocks for layer in pair]
        self.out = Linear(hidden, n_out, rng, zero=zero_out)

    def named_parameters(self, prefix: str = ""):
        out = self.inp.named_parameters(prefix + "inp.")
        for i, layer in enumerate(self.block_layers):
            out.extend(layer.named_parameters(f"{prefix}block{i // 2}.{i % 2}."))
        out.extend(self.out.named_parameters(prefix + "out."))
        return out

    def __call__(self, x: Tensor) -> Tensor:
        h = self.inp(x)
        for a, b in self.blocks:
            h = h + b(a(h.relu()).relu())
        return self.out(h.relu())


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, padding: int = 0):
        fan_in = c_in * k * k
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, padding=self.padding)


def pool(x: Tensor) -> Tensor:
    return avg_pool2d(x, 2)
