"""Central finite-difference gradient checks for the engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, mul, sum_over_axes


def _weights(shape) -> np.ndarray:
    # fixed random cotangent: an all-ones seed can hide transposed or mis-summed gradients
    return np.random.default_rng(1234).uniform(0.5, 1.5, size=shape)


def _scalar(out: Tensor) -> Tensor:
    return out if out.size == 1 else sum_over_axes(mul(out, Tensor(_weights(out.shape))))


def probe_coords(size: int, max_coords: int | None, seed: int = 0) -> np.ndarray:
    """All flat indices, or a seeded sample of ``max_coords`` of them."""
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(np.random.default_rng(seed).choice(size, max_coords, replace=False))


def numeric_gradient(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], index: int,
                     h: float = 1e-6, coords: np.ndarray | None = None) -> np.ndarray:
    """d fn / d inputs[index] by central differences at the given flat coordinates (default: all).

    Returns a flat array with one entry per coordinate.
    """
    base = [np.array(a, dtype=np.float64) for a in inputs]
    x = base[index]
    flat = x.reshape(-1)
    coords = np.arange(flat.size) if coords is None else np.asarray(coords)
    gflat = np.zeros(coords.size)
    for j, i in enumerate(coords):
        old = flat[i]
        flat[i] = old + h
        up = float(_scalar(fn(*[Tensor(a) for a in base])).data)
        flat[i] = old - h
        down = float(_scalar(fn(*[Tensor(a) for a in base])).data)
        flat[i] = old
        gflat[j] = (up - down) / (2 * h)
    return gflat


def analytic_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    _scalar(fn(*ts)).backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-6,
                    wrt: Sequence[int] | None = None, max_coords: int | None = None) -> list[float]:
    """Relative error between backprop and finite differences, one value per checked input.

    ``fn`` maps float64 tensors to a tensor; non-scalar outputs are reduced
    with fixed random weights.  Large inputs can be probed on a seeded
    subset of ``max_coords`` coordinates.
    """
    analytic = analytic_gradients(fn, inputs)
    idx = range(len(inputs)) if wrt is None else wrt
    errs = []
    for i in idx:
        coords = probe_coords(np.size(inputs[i]), max_coords, seed=i)
        errs.append(relative_error(analytic[i].reshape(-1)[coords], numeric_gradient(fn, inputs, i, h, coords)))
    return errs
