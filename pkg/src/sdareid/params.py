"""Parameter containers and the momentum-SGD optimizer."""

from __future__ import annotations

from collections.abc import Iterator, Mapping

import numpy as np

from sdareid.tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor with a gradient buffer and a momentum buffer."""

    __slots__ = ("momentum",)

    def __init__(self, data, name: str | None = None) -> None:
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.momentum = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


class ParamSet(Mapping[str, Parameter]):
    """Named group of parameters (e.g. the backbone, or the decoder).

    ``frozen`` groups are skipped by :func:`sgd_step`.
    """

    def __init__(self, name: str, tensors: Mapping[str, np.ndarray] | None = None) -> None:
        self.name = name
        self.frozen = False
        self._params: dict[str, Parameter] = {}
        for key, value in (tensors or {}).items():
            self.add(key, value)

    def add(self, key: str, value: np.ndarray) -> Parameter:
        p = Parameter(value, name=f"{self.name}.{key}")
        self._params[key] = p
        return p

    def __getitem__(self, key: str) -> Parameter:
        return self._params[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}={v.shape}" for k, v in self._params.items())
        return f"ParamSet({self.name!r}, {shapes})"

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        """Copies of the parameter values."""
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            raise KeyError(f"state keys {sorted(state)} do not match {sorted(self._params)} in {self.name!r}")
        for k, value in state.items():
            p = self._params[k]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{self.name}.{k}: shape {value.shape} != {p.shape}")
            p.data = value.copy()

    def reset_momentum(self) -> None:
        for p in self._params.values():
            p.momentum = np.zeros_like(p.data)


def sgd_step(params: ParamSet, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> ParamSet:
    """One in-place step of heavy-ball SGD with L2 weight decay.

    ``v <- momentum * v + (g + weight_decay * p)``, ``p <- p - lr * v``.
    Gradient buffers are left for the caller to clear.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if params.frozen:
        return params
    for key, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter group {params.name!r} ({key})")
    for p in params.values():
        direction = p.grad + weight_decay * p.data if weight_decay else p.grad
        p.momentum = momentum * p.momentum + direction
        p.data = p.data - lr * p.momentum
    return params


def warmup_lr(epoch: int, base_lr: float, warmup_epochs: int) -> float:
    """Linear warmup: ``(epoch + 1) / warmup_epochs * base_lr`` until the ramp ends."""
    if epoch < 0 or warmup_epochs < 0:
        raise ValueError("epoch and warmup_epochs must be non-negative")
    if warmup_epochs == 0 or epoch >= warmup_epochs:
        return base_lr
    return base_lr * (epoch + 1) / warmup_epochs
