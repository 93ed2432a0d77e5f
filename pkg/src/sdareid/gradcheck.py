"""Finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from collections.abc import Callable, Iterable, Mapping

import numpy as np

from sdareid.tensor import Tensor


class NondeterministicLossError(RuntimeError):
    pass


def _leaves(params) -> list[Tensor]:
    if isinstance(params, Tensor):
        return [params]
    if isinstance(params, Mapping):
        return list(params.values())
    out: list[Tensor] = []
    for item in params:
        out.extend(_leaves(item))
    return out


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable,
    eps: float = 1e-6,
    max_coords: int | None = 64,
    floor: float = 1e-3,
    seed: int = 0,
) -> float:
    """Largest per-coordinate discrepancy between backprop and central differences.

    The error for a coordinate is ``|analytic - numeric| / max(|analytic|, |numeric|)``,
    falling back to the absolute difference when both magnitudes are below ``floor``.
    At most ``max_coords`` coordinates per tensor are probed (chosen with ``seed``).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    leaves = _leaves(params)

    first = loss_fn()
    second = loss_fn()
    if first.data.tobytes() != second.data.tobytes():
        raise NondeterministicLossError(
            f"loss_fn gave {first.item()!r} then {second.item()!r}; fix its seed before checking"
        )

    saved = [leaf.grad for leaf in leaves]
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.data)
    if first.requires_grad:
        first.backward()
    analytic = [leaf.grad.copy() for leaf in leaves]
    for leaf, g in zip(leaves, saved):
        leaf.grad = g

    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf, grad in zip(leaves, analytic):
        flat_size = leaf.data.size
        if max_coords is None or flat_size <= max_coords:
            coords = np.arange(flat_size)
        else:
            coords = rng.choice(flat_size, size=max_coords, replace=False)
        original = leaf.data
        for c in coords:
            idx = np.unravel_index(c, leaf.shape)
            bumped = original.copy()
            bumped[idx] += eps
            leaf.data = bumped
            up = loss_fn().item()
            bumped = original.copy()
            bumped[idx] -= eps
            leaf.data = bumped
            down = loss_fn().item()
            leaf.data = original
            numeric = (up - down) / (2.0 * eps)
            a = float(grad[idx])
            scale = max(abs(a), abs(numeric))
            err = abs(a - numeric)
            if scale >= floor:
                err /= scale
            worst = max(worst, err)
    return worst
