"""Named parameter storage, initialization and scoped access during a forward pass."""

from __future__ import annotations

from typing import Mapping, MutableMapping, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

BN_BUFFERS = ("running_mean", "running_var")


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class ParamBuilder:
    """Collects freshly initialized parameters and buffers under dotted names."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = dtype
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _put(self, store, name, value):
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter {name}")
        store[name] = np.asarray(value, dtype=self.dtype)

    def weight(self, name, shape, std: float = 0.02):
        self._put(self.params, name, trunc_normal(self.rng, shape, std))

    def zeros(self, name, shape):
        self._put(self.params, name, np.zeros(shape))

    def ones(self, name, shape):
        self._put(self.params, name, np.ones(shape))

    def linear(self, prefix, cin, cout, bias=True):
        self.weight(f"{prefix}.w", (cin, cout))
        if bias:
            self.zeros(f"{prefix}.b", (cout,))

    def depthwise(self, prefix, channels, kernel):
        self.weight(f"{prefix}.w", (channels, kernel, kernel))
        self.zeros(f"{prefix}.b", (channels,))

    def conv(self, prefix, kernel, cin, cout):
        self.weight(f"{prefix}.w", (kernel, kernel, cin, cout))
        self.zeros(f"{prefix}.b", (cout,))

    def layernorm(self, prefix, channels):
        self.ones(f"{prefix}.g", (channels,))
        self.zeros(f"{prefix}.b", (channels,))

    def batchnorm(self, prefix, channels):
        self.layernorm(prefix, channels)
        self._put(self.buffers, f"{prefix}.running_mean", np.zeros(channels))
        self._put(self.buffers, f"{prefix}.running_var", np.ones(channels))


class Scope:
    """Read-only view of named tensors under a dotted prefix.

    Batchnorm in training mode writes its updated running statistics into
    ``updates`` rather than touching ``buffers``.
    """

    def __init__(self, tensors: Mapping[str, Tensor], buffers: Mapping[str, np.ndarray],
                 training: bool = False, updates: Optional[MutableMapping] = None, prefix: str = "",
                 momentum: float = 0.1):
        self.tensors = tensors
        self.momentum = momentum
        self.buffers = buffers
        self.training = training
        self.updates = updates if updates is not None else {}
        self.prefix = prefix

    def child(self, name: str) -> "Scope":
        return Scope(self.tensors, self.buffers, self.training, self.updates, f"{self.prefix}{name}.",
                     self.momentum)

    def __getitem__(self, name: str) -> Tensor:
        key = self.prefix + name
        try:
            return self.tensors[key]
        except KeyError:
            raise KeyError(f"missing parameter {key}") from None

    def get(self, name: str) -> Optional[Tensor]:
        return self.tensors.get(self.prefix + name)

    def layernorm(self, name: str, x: Tensor) -> Tensor:
        return T.layernorm(x, self[f"{name}.g"], self[f"{name}.b"])

    def batchnorm(self, name: str, x: Tensor) -> Tensor:
        base = f"{self.prefix}{name}"
        out, stats = T.batchnorm(x, self[f"{name}.g"], self[f"{name}.b"],
                                 self.buffers[f"{base}.running_mean"], self.buffers[f"{base}.running_var"],
                                 training=self.training, momentum=self.momentum)
        if stats is not None:
            self.updates[f"{base}.running_mean"], self.updates[f"{base}.running_var"] = stats
        return out

    def conv1x1(self, name: str, x: Tensor) -> Tensor:
        return T.conv1x1(x, self[f"{name}.w"], self.get(f"{name}.b"))

    def dwconv(self, name: str, x: Tensor) -> Tensor:
        return T.dwconv(x, self[f"{name}.w"], self.get(f"{name}.b"))


def wrap(params: Mapping[str, np.ndarray], requires_grad: bool = False, dtype=None) -> dict[str, Tensor]:
    return {k: T.tensor(v, requires_grad=requires_grad, dtype=dtype) for k, v in params.items()}
