"""Parameter bookkeeping and the handful of network blocks the detector uses."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Parameter, Value, layer_norm, softmax
from .errors import ContractError


class ParamStore:
    """Ordered collection of uniquely named parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data) -> Parameter:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Parameter(np.array(data, dtype=np.float64), name)
        self._params[name] = p
        return p

    def linear(self, rng: np.random.Generator, name: str, d_in: int, d_out: int, bias: bool = True) -> None:
        bound = 1.0 / math.sqrt(d_in)
        self.add(f"{name}.w", rng.uniform(-bound, bound, size=(d_in, d_out)))
        if bias:
            self.add(f"{name}.b", np.zeros(d_out))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self._params[k].data[...] = v


def linear(x: Value, store: ParamStore, name: str) -> Value:
    y = x @ store[f"{name}.w"]
    b = f"{name}.b"
    return y + store[b] if b in store else y


def mlp2(x: Value, store: ParamStore, name: str) -> Value:
    """Two linear layers with a ReLU in between."""
    return linear(linear(x, store, f"{name}.0").relu(), store, f"{name}.1")


def attention(q_in: Value, k_in: Value, v_in: Value, store: ParamStore, name: str) -> Value:
    """Single-head scaled dot-product attention with output projection."""
    q = q_in @ store[f"{name}.wq"]
    k = k_in @ store[f"{name}.wk"]
    v = v_in @ store[f"{name}.wv"]
    scale = 1.0 / math.sqrt(q.shape[1])
    weights = softmax((q @ k.T) * scale, axis=-1)
    return (weights @ v) @ store[f"{name}.wo"]


def add_attention(store: ParamStore, rng: np.random.Generator, name: str, d: int) -> None:
    bound = 1.0 / math.sqrt(d)
    for part in ("wq", "wk", "wv", "wo"):
        store.add(f"{name}.{part}", rng.uniform(-bound, bound, size=(d, d)))


def norm(x: Value, store: ParamStore, name: str) -> Value:
    return layer_norm(x) * store[f"{name}.g"] + store[f"{name}.b"]


def add_norm(store: ParamStore, name: str, d: int) -> None:
    store.add(f"{name}.g", np.ones(d))
    store.add(f"{name}.b", np.zeros(d))


def inverse_sigmoid(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.clip(x, eps, 1.0 - eps)
    return np.log(x / (1.0 - x))
