"""Parameter containers, layer wrappers, and the Adam optimizer."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ParamSet:
    """Insertion-ordered, uniquely named collection of trainable tensors."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(array, dtype=self.dtype),
                   requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def total_size(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)} "
                             f"extra={sorted(extra)}")
        for name, t in self._params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: "
                                 f"stored {arr.shape}, expected {t.data.shape}")
            t.data = np.ascontiguousarray(arr, dtype=self.dtype)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """He-style uniform init, bound sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Affine map y = x @ w + b with weights shaped (in, out)."""

    def __init__(self, params: ParamSet, name: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator, bias: bool = True):
        self.w = params.add(f"{name}.w", kaiming_uniform(rng, (in_dim, out_dim), in_dim))
        self.b = params.add(f"{name}.b", np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.w)
        if self.b is not None:
            y = ad.add(y, self.b)
        return y


class Conv2d:
    """Strided 2D convolution layer over NCHW tensors."""

    def __init__(self, params: ParamSet, name: str, in_ch: int, out_ch: int,
                 kernel: int, stride: int, padding: int, rng: np.random.Generator,
                 bias: bool = True):
        fan_in = in_ch * kernel * kernel
        self.w = params.add(f"{name}.w",
                            kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.b = params.add(f"{name}.b", np.zeros(out_ch)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class MLP:
    """Stack of Linear layers with ReLU between hidden layers.

    final_activation: None, "relu", "tanh", or "sigmoid" applied to the last
    layer's output.
    """

    def __init__(self, params: ParamSet, name: str, dims: list[int],
                 rng: np.random.Generator, final_activation: str | None = None):
        if len(dims) < 2:
            raise ValueError(f"MLP needs at least [in, out] dims, got {dims}")
        self.layers = [Linear(params, f"{name}.{i}", dims[i], dims[i + 1], rng)
                       for i in range(len(dims) - 1)]
        self.final_activation = final_activation

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last:
                x = ad.relu(x)
            elif self.final_activation == "relu":
                x = ad.relu(x)
            elif self.final_activation == "tanh":
                x = ad.tanh(x)
            elif self.final_activation == "sigmoid":
                x = ad.sigmoid(x)
        return x


class Adam:
    """Adam with bias correction; moments live in the parameter dtype."""

    def __init__(self, params: ParamSet, lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([self.t], dtype=np.float64)}
        for name in self.params.names():
            out[f"adam.m.{name}"] = self._m[name].copy()
            out[f"adam.v.{name}"] = self._v[name].copy()
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"][0])
        for name in self.params.names():
            self._m[name] = np.ascontiguousarray(arrays[f"adam.m.{name}"])
            self._v[name] = np.ascontiguousarray(arrays[f"adam.v.{name}"])
