"""SGD with heavy-ball momentum and coupled L2 weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class OptimState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-5
    velocity: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractError(f"weight_decay must be non-negative, got {self.weight_decay}")


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: OptimState,
) -> None:
    """Update ``params`` in place.

    v <- momentum * v + grad + weight_decay * w
    w <- w - lr * v

    A missing gradient (``None``) is treated as zero.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    elif len(state.velocity) != len(params):
        raise DimensionError("velocity buffers do not match parameter list")

    for p, g, v in zip(params, grads, state.velocity):
        if v.shape != p.data.shape or (g is not None and g.shape != p.data.shape):
            raise DimensionError(f"shape mismatch for parameter {p.name or ''} {p.data.shape}")
        v *= state.momentum
        if g is not None:
            v += g
        if state.weight_decay:
            v += state.weight_decay * p.data
        p.data -= state.lr * v


class SGD:
    """Thin stateful wrapper pairing a parameter list with an :class:`OptimState`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.1, momentum: float = 0.9,
                 weight_decay: float = 1e-5):
        self.params = list(params)
        self.state = OptimState(lr=lr, momentum=momentum, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: Optional[Sequence[Optional[np.ndarray]]] = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        sgd_step(self.params, grads, self.state)
