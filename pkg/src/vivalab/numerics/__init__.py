"""Seeded randomness, dense tensors, reverse-mode gradients, serialization."""

from __future__ import annotations

import numpy as np

from .rng import Rng, Stream  # noqa: F401
from .tensor import (  # noqa: F401
    ContractError,
    DEFAULT_DTYPE,
    GradTape,
    Grads,
    NonFiniteError,
    NumericsError,
    ShapeError,
    Tensor,
    add,
    broadcast_to,
    clip_const,
    concat,
    constant,
    div,
    exp,
    gather_rows,
    gelu,
    layer_norm,
    log,
    matmul,
    minimum,
    mul,
    neg,
    parameter,
    power,
    relu2,
    reshape,
    set_finite_checks,
    softmax,
    sqrt,
    sub,
    tanh,
    tmean,
    transpose,
    tsum,
)
from . import serialize  # noqa: F401
from .optim import Adam  # noqa: F401


def gaussian(stream: Stream, shape, dtype=np.float32) -> Tensor:
    """Standard-normal tensor drawn from a named stream."""
    return Tensor(stream.normal(shape, dtype=dtype))
