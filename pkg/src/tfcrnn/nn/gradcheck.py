from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad, record_branches


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    worst: tuple[str, tuple[int, ...]] | None
    # Probes whose +h or -h evaluation took a different ReLU/max-pool branch
    # than the base point; the central difference is meaningless there.
    kink_crossings: int = 0

    def __float__(self) -> float:
        return self.max_rel_error


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / scale


def _evaluate(fn: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    with record_branches() as branches:
        value = float(np.asarray(fn().data, dtype=np.float64))
    return value, branches


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-3,
               fraction: float = 1.0, rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare backprop gradients with central finite differences.

    ``fn`` must be deterministic and return a scalar built from ``tensors``,
    which are perturbed in place. Tensors should hold float64 data. With
    ``fraction < 1`` only that share of elements (at least one per tensor)
    is probed.
    """
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    fn().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in tensors]

    worst_err, worst_at, checked, crossings = 0.0, None, 0, 0
    rng = rng or np.random.default_rng(0)
    with no_grad():
        _, base_branches = _evaluate(fn)
        for i, t in enumerate(tensors):
            flat = t.data.reshape(-1)
            if fraction >= 1.0:
                positions = np.arange(flat.size)
            else:
                count = max(1, int(round(fraction * flat.size)))
                positions = rng.choice(flat.size, size=count, replace=False)
            for pos in positions:
                original = flat[pos]
                flat[pos] = original + h
                plus, plus_branches = _evaluate(fn)
                flat[pos] = original - h
                minus, minus_branches = _evaluate(fn)
                flat[pos] = original
                if not (_same_branches(base_branches, plus_branches)
                        and _same_branches(base_branches, minus_branches)):
                    crossings += 1
                numeric = (plus - minus) / (2 * h)
                err = float(relative_error(analytic[i].reshape(-1)[pos], numeric))
                checked += 1
                if worst_at is None or err > worst_err:
                    worst_err = err
                    worst_at = (t.name or f"input{i}", tuple(int(j) for j in np.unravel_index(pos, t.shape)))
    for t in tensors:
        t.zero_grad()
    return GradCheckResult(worst_err, checked, worst_at, crossings)
