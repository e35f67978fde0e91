"""Adam with bias-corrected moments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from alto.ad.tensor import Tensor
from alto.errors import DimensionError, NonFiniteError


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **hyper) -> "AdamState":
        arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
        state = cls(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays], **hyper)
        if state.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {state.lr}")
        return state


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, names=None) -> None:
    """Update ``params`` and ``state`` in place.

    Raises NonFiniteError before touching anything if a gradient is not finite,
    and after the update if a parameter became non-finite.
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise DimensionError(f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise DimensionError(f"adam_step: param {i} shape {p.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"adam_step aborted at t={state.t + 1}: {bad} non-finite gradient entries in {label}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
        if not np.all(np.isfinite(p)):
            label = names[i] if names else f"#{i}"
            raise NonFiniteError(f"adam_step produced non-finite values in {label} at t={state.t}")


@dataclass
class Adam:
    """Thin stateful wrapper binding an AdamState to a list of tensors."""

    params: list[Tensor]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    names: list[str] | None = None
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.zeros_like(
            self.params, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps
        )

    def step(self, grads: list[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.names)
