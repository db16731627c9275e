"""Named parameter storage, seeded initialisation and the Adam optimiser."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .tensor import ContractError, Tensor, default_dtype


def seeded_init(shape, fan_in: int, rng_seed) -> Tensor:
    """He-uniform draw in ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``, deterministic in the seed."""
    bound = np.sqrt(6.0 / fan_in)
    rng = np.random.default_rng(rng_seed)
    data = rng.uniform(-bound, bound, size=tuple(shape))
    return Tensor(data, requires_grad=True)


def name_seed(seed: int, name: str) -> list[int]:
    """Stable per-parameter seed material (``hash()`` is salted per process)."""
    return [int(seed), zlib.crc32(name.encode("utf-8"))]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamStore:
    """Ordered map from dotted parameter path to a trainable tensor."""

    params: dict[str, Tensor] = field(default_factory=dict)
    adam: dict[str, AdamState] = field(default_factory=dict)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        tensor.name = name
        self.params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def subtree(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix`` keyed by their path relative to it."""
        dot = prefix if prefix.endswith(".") else prefix + "."
        return {n[len(dot):]: t for n, t in self.params.items() if n.startswith(dot)}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for name, arr in state.items():
            if name not in self.params:
                continue
            t = self.params[name]
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=t.dtype)

    def astype(self, dtype=None) -> "ParamStore":
        """Copy of the parameters (no optimiser state); ``dtype=None`` keeps each one's."""
        out = ParamStore()
        for name, t in self.params.items():
            out.add(name, Tensor(t.data.copy(), dtype=dtype or t.dtype))
        return out

    copy = astype


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names: list[str] | None = None,
) -> None:
    """One bias-corrected Adam update of ``names`` (default: every parameter).

    Gradients are left in place; the caller zeroes them.
    """
    for name in store.names() if names is None else names:
        p = store[name]
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        state = store.adam.get(name)
        if state is None:
            state = store.adam[name] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
        state.step += 1
        g = p.grad.astype(p.dtype, copy=False)
        state.m = beta1 * state.m + (1.0 - beta1) * g
        state.v = beta2 * state.v + (1.0 - beta2) * (g * g)
        m_hat = state.m / (1.0 - beta1**state.step)
        v_hat = state.v / (1.0 - beta2**state.step)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=default_dtype()), requires_grad=True)
