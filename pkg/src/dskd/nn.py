"""Parameter containers, initialization and the SGD optimizer."""

from __future__ import annotations

import copy

import numpy as np

from .tensor import Tensor


class Module:
    """A named, ordered bag of parameter tensors."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.params.items():
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing parameter {key!r}")
            arr = np.asarray(state[key])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {key!r}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def freeze(self) -> "Module":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def cast(self, dtype) -> "Module":
        """Deep copy with every parameter converted to ``dtype``."""
        other = copy.copy(self)
        other.params = {
            k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, dtype=dtype) for k, v in self.params.items()
        }
        for k, v in vars(self).items():
            if isinstance(v, Module):
                setattr(other, k, v.cast(dtype))
        return other

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def detached(self) -> "Module":
        """Shallow copy sharing parameter storage but cut from the tape."""
        other = copy.copy(self)
        other.params = {k: v.detach() for k, v in self.params.items()}
        return other


def fan_in_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 2.0) -> np.ndarray:
    """He-style normal init: std = sqrt(gain / fan_in)."""
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(np.float32)


class SGD:
    """SGD with heavy-ball momentum: v <- m*v + (g + wd*p); p <- p - lr*v."""

    def __init__(self, named_params: dict[str, Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = named_params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad if self.weight_decay == 0 else p.grad + self.weight_decay * p.data
            buf = self.buffers.get(name)
            buf = g.astype(p.dtype) if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            p.data = (p.data - self.lr * buf).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self, prefix: str = "optim.") -> dict[str, np.ndarray]:
        return {prefix + k: v for k, v in self.buffers.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "optim.") -> None:
        self.buffers = {}
        for key, value in state.items():
            if key.startswith(prefix):
                name = key[len(prefix):]
                if name not in self.params:
                    raise KeyError(f"optimizer state for unknown parameter {name!r}")
                self.buffers[name] = np.asarray(value, dtype=self.params[name].dtype).copy()
