"""The discriminative model M: logits plus the penultimate feature map."""
from __future__ import annotations

import numpy as np

from .nn import Conv2d, Linear, Module, pool
from .numeric import Tensor, as_tensor, backward, cross_entropy, make_optimizer, no_grad, softmax
from .rng import rng_for


class MLPClassifier(Module):
    """Fully connected net for vector inputs; features are the last hidden layer."""

    def __init__(self, input_dim: int, n_classes: int, hidden=(128, 128), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim = int(input_dim)
        self.n_classes = int(n_classes)
        self.hidden = tuple(int(h) for h in hidden)
        sizes = (self.input_dim,) + self.hidden
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.head = Linear(sizes[-1], n_classes, rng, zero=True)

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1]

    def descriptor(self) -> dict:
        return {"kind": "mlp", "input_shape": [self.input_dim], "n_classes": self.n_classes, "hidden": list(self.hidden)}

    def forward(self, x) -> tuple[Tensor, Tensor]:
        h = as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ValueError(f"expected input of shape (N, {self.input_dim}), got {h.shape}")
        for layer in self.layers:
            h = layer(h).relu()
        return self.head(h), h


class ConvClassifier(Module):
    """Two conv + two dense layers, a LeNet-sized stand-in for image data."""

    def __init__(self, input_shape, n_classes: int, channels=(8, 16), dense: int = 64, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.n_classes = int(n_classes)
        self.channels = tuple(channels)
        self.dense = int(dense)
        c, h, w = self.input_shape
        self.conv1 = Conv2d(c, channels[0], 3, rng, padding=1)
        self.conv2 = Conv2d(channels[0], channels[1], 3, rng, padding=1)
        flat = channels[1] * (h // 4) * (w // 4)
        self.fc = Linear(flat, dense, rng)
        self.head = Linear(dense, n_classes, rng, zero=True)

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def feature_dim(self) -> int:
        return self.dense

    def descriptor(self) -> dict:
        return {
            "kind": "conv",
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "channels": list(self.channels),
            "dense": self.dense,
        }

    def forward(self, x) -> tuple[Tensor, Tensor]:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected input of shape (N, {self.input_dim}), got {x.shape}")
        h = x.reshape((x.shape[0],) + self.input_shape)
        h = pool(self.conv1(h).relu())
        h = pool(self.conv2(h).relu())
        h = h.reshape(x.shape[0], -1)
        feats = self.fc(h).relu()
        return self.head(feats), feats


def build_classifier(descriptor: dict, rng=None):
    kind = descriptor["kind"]
    if kind == "mlp":
        return MLPClassifier(descriptor["input_shape"][0], descriptor["n_classes"], descriptor.get("hidden", (128, 128)), rng)
    if kind == "conv":
        return ConvClassifier(
            descriptor["input_shape"], descriptor["n_classes"], descriptor.get("channels", (8, 16)), descriptor.get("dense", 64), rng
        )
    raise ValueError(f"unknown classifier kind {kind!r}")


def default_descriptor(input_shape, n_classes: int) -> dict:
    input_shape = [int(s) for s in np.atleast_1d(input_shape)]
    if len(input_shape) == 3:
        return {"kind": "conv", "input_shape": input_shape, "n_classes": n_classes, "channels": [8, 16], "dense": 64}
    return {"kind": "mlp", "input_shape": [int(np.prod(input_shape))], "n_classes": n_classes, "hidden": [128, 128]}


def predict_proba(clf, x, batch_size: int = 512) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            out.append(softmax(clf.forward(x[i : i + batch_size])[0]).data)
    return np.concatenate(out) if out else np.zeros((0, clf.n_classes))


def accuracy(clf, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict_proba(clf, x).argmax(axis=1) == np.asarray(y)))


def fit_classifier(x, y, n_classes: int, input_shape=None, *, epochs: int = 30, lr: float = 1e-4, batch: int = 128,
                   optimizer: str = "adam", seed: int = 0, hidden=None):
    """Plain cross-entropy training of the default classifier, no flow and no augmentation.

    Uses the same named random streams as the joint trainer, so ``mode=pure``
    runs reproduce it exactly.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.int64)
    descriptor = default_descriptor(input_shape if input_shape is not None else (x.shape[1],), n_classes)
    if hidden and descriptor["kind"] == "mlp":
        descriptor["hidden"] = list(hidden)
    clf = build_classifier(descriptor, rng_for(seed, "classifier"))
    opt = make_optimizer(optimizer, clf.parameters(), lr)
    for e in range(epochs):
        order = rng_for(seed, "shuffle", e).permutation(len(x))
        for i in range(0, len(x), batch):
            idx = order[i : i + batch]
            loss = cross_entropy(clf.forward(x[idx])[0], y[idx])
            backward(loss)
            opt.step()
            opt.zero_grad()
    return clf


__all__ = [
    "fit_classifier",
    "MLPClassifier",
    "ConvClassifier",
    "build_classifier",
    "default_descriptor",
    "cross_entropy",
    "predict_proba",
    "accuracy",
]
