"""Central finite-difference gradient checking."""

from __future__ import annotations

import warnings
from typing import Callable, Sequence

import numpy as np

from alto.ad.tensor import Tensor, backward, no_grad


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps Tensors to a scalar Tensor. Error per coordinate is
    ``|ad - fd| / max(|ad|, |fd|, floor)``. With ``max_coords`` only that many
    coordinates per input are probed (chosen with a seeded generator).
    """
    arrays = [np.array(x, copy=True) for x in inputs]
    if any(a.dtype == np.float32 for a in arrays):
        warnings.warn("grad_check on float32 inputs: finite differences are unreliable", RuntimeWarning)
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(*leaves)
    ad = backward(out, leaves)

    rng = np.random.Generator(np.random.Philox(seed))
    worst = 0.0
    for a, g in zip(arrays, ad):
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = f(*[Tensor(x) for x in arrays]).item()
                flat[i] = orig - eps
                fm = f(*[Tensor(x) for x in arrays]).item()
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            err = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), floor)
            worst = max(worst, err)
    return worst
