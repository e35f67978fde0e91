"""Parameter registry and the small building blocks shared by encoder and decoder.

Parameters are plain ``dict[str, Tensor]`` keyed by dotted names; insertion
order is the canonical order for optimizers and checkpoints.
"""

from __future__ import annotations

import numpy as np

from alto.ad import Tensor, ops
from alto.errors import ConfigError

Params = dict


class ParamBuilder:
    """Allocates named parameters with Kaiming-uniform weights and zero biases.

    The bound is ``sqrt(6 / ((1 + a^2) * fan_in))`` with ``a = sqrt(5)``,
    i.e. ``1 / sqrt(fan_in)``.
    """

    def __init__(self, rng: np.random.Generator, dtype=np.float64):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.params: Params = {}

    def _add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name!r}")
        self.params[name] = Tensor(value.astype(self.dtype), requires_grad=True)

    def weight(self, name: str, shape: tuple[int, ...], fan_in: int, zero: bool = False) -> None:
        if zero:
            self._add(name, np.zeros(shape))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            self._add(name, self.rng.uniform(-bound, bound, size=shape))

    def bias(self, name: str, shape: tuple[int, ...]) -> None:
        self._add(name, np.zeros(shape))

    def linear(self, name: str, n_in: int, n_out: int, zero: bool = False) -> None:
        self.weight(f"{name}.weight", (n_in, n_out), n_in, zero)
        self.bias(f"{name}.bias", (n_out,))

    def grouped_linear(self, name: str, groups: int, n_in: int, n_out: int) -> None:
        self.weight(f"{name}.weight", (groups, n_in, n_out), n_in)
        self.bias(f"{name}.bias", (groups, n_out))

    def conv(self, name: str, dims: int, c_in: int, c_out: int, k: int = 3) -> None:
        self.weight(f"{name}.weight", (k,) * dims + (c_in, c_out), c_in * k**dims)
        self.bias(f"{name}.bias", (c_out,))

    def mlp2(self, name: str, n_in: int, n_hidden: int, n_out: int, zero_last: bool = False) -> None:
        self.linear(f"{name}.fc1", n_in, n_hidden)
        self.linear(f"{name}.fc2", n_hidden, n_out, zero=zero_last)

    def resnet_fc(self, name: str, n_in: int, n_out: int | None = None) -> None:
        n_out = n_in if n_out is None else n_out
        self.linear(f"{name}.fc0", n_in, n_out)
        self.linear(f"{name}.fc1", n_out, n_out)
        if n_in != n_out:
            self.weight(f"{name}.shortcut.weight", (n_in, n_out), n_in)


def linear(params: Params, name: str, x) -> Tensor:
    return ops.linear(x, params[f"{name}.weight"], params[f"{name}.bias"])


def grouped_linear(params: Params, name: str, x) -> Tensor:
    return ops.grouped_linear(x, params[f"{name}.weight"], params[f"{name}.bias"])


def mlp2(params: Params, name: str, x) -> Tensor:
    return linear(params, f"{name}.fc2", ops.relu(linear(params, f"{name}.fc1", x)))


def resnet_fc(params: Params, name: str, x) -> Tensor:
    """Pre-activation residual block: x + fc1(relu(fc0(relu(x))))."""
    h = linear(params, f"{name}.fc0", ops.relu(x))
    dx = linear(params, f"{name}.fc1", ops.relu(h))
    short = params.get(f"{name}.shortcut.weight")
    skip = x if short is None else ops.matmul(x, short)
    return ops.add(skip, dx)


def conv(params: Params, name: str, x, stride: int = 1, padding: str = "zero") -> Tensor:
    return ops.conv(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, padding=padding)


def count(params: Params, prefix: str = "") -> int:
    return int(sum(p.size for k, p in params.items() if k.startswith(prefix)))
