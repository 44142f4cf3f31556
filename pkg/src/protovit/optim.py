"""Adam with decoupled (AdamW) or coupled L2 weight decay, and gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    decoupled: bool = True
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(params: Sequence[Tensor], state: OptimState,
                   grads: Optional[Sequence[np.ndarray]] = None,
                   names: Optional[Sequence[str]] = None) -> None:
    """One in-place update of ``params``.

    ``grads`` defaults to each parameter's ``.grad`` (missing grads count as zero).
    Nothing is modified if any gradient is non-finite.
    """
    params = list(params)
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    names = list(names) if names is not None else [f"param[{i}]" for i in range(len(params))]
    for name, g in zip(names, grads):
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradientError(f"non-finite gradient in {name}: {bad} bad entries; step aborted")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    bc1, bc2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=p.dtype)
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay and state.decoupled:
            p.data *= p.dtype.type(1.0 - state.lr * state.weight_decay)
        step = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= (state.lr * step).astype(p.dtype, copy=False)


def clip_gradients(params: Sequence[Tensor], max_norm: float = 1.0) -> list[float]:
    """Rescale each parameter's gradient independently to L2 norm <= ``max_norm``.

    Returns the pre-clipping norms.
    """
    norms = []
    for p in params:
        if p.grad is None:
            norms.append(0.0)
            continue
        norm = float(np.sqrt(np.sum(np.square(p.grad, dtype=np.float64))))
        norms.append(norm)
        if norm > max_norm:
            p.grad = p.grad * p.grad.dtype.type(max_norm / norm)
    return norms
