"""Central finite differences, the independent oracle for every gradient."""

from __future__ import annotations

import numpy as np


def central_difference(f, arr: np.ndarray, index: tuple, step: float = 1e-5) -> float:
    """d f / d arr[index] via a symmetric two-point stencil.

    `f` is called with no arguments and must read `arr` by reference; the
    entry is perturbed in place and restored. Use float64 arrays.
    """
    original = arr[index]
    arr[index] = original + step
    f_plus = float(f())
    arr[index] = original - step
    f_minus = float(f())
    arr[index] = original
    return (f_plus - f_minus) / (2.0 * step)


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    scale = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / scale


def random_indices(shape: tuple[int, ...], count: int, gen: np.random.Generator):
    """A sample of coordinate tuples into an array of the given shape."""
    total = int(np.prod(shape)) if shape else 1
    flat = gen.integers(0, total, size=min(count, total))
    return [np.unravel_index(int(i), shape) if shape else () for i in flat]
