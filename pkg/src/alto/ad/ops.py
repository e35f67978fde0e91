"""Differentiable array ops.

Every function accepts Tensors (or array-likes, treated as constants) and
returns a Tensor. Shapes follow numpy semantics; broadcasting is supported
for the binary elementwise ops only.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from alto.ad.tensor import Tensor, as_tensor, make_node
from alto.errors import ConfigError, ContractError, DimensionError


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return make_node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return make_node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), bw, "mul")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.dtype.type(c)
    return make_node(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype)
    return make_node(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def log(x) -> Tensor:
    x = as_tensor(x)
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def abs(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    s = np.sign(x.data)
    return make_node(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


# -- reductions / shape --------------------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat of an empty list")
    ndim = xs[0].ndim
    ax = axis % ndim
    for x in xs:
        if x.ndim != ndim or any(x.shape[i] != xs[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(f"concat axis {axis}: incompatible shapes {[x.shape for x in xs]}")
    cuts = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return make_node(np.concatenate([x.data for x in xs], axis=ax), xs, bw, "concat")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), bw, "softmax")


# -- linear algebra ------------------------------------------------------------


def _rows_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` whose rows do not depend on how many rows ``a`` has.

    BLAS sends single-row and single-column products down a matrix-vector
    path with a different summation order. Single columns are reduced row by
    row instead, and single rows are doubled so they stay on the gemm path.
    """
    if b.shape[1] == 1:
        return np.einsum("ij,j->i", a, b[:, 0])[:, None]
    if a.shape[0] == 1:
        return (np.concatenate([a, a]) @ b)[:1]
    return a @ b


def matmul(x, w) -> Tensor:
    """``x @ w`` for x of shape (..., n) and w of shape (n, m)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"matmul: x axis -1 has {x.shape[-1]} but w axis 0 has {w.shape[0] if w.ndim else 'n/a'}"
        )
    x2 = x.data.reshape(-1, x.shape[-1])
    y = _rows_matmul(x2, w.data).reshape(x.shape[:-1] + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        return gx, gw

    return make_node(y, (x, w), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """Affine map ``x @ w + b`` over the last axis."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2:
        raise DimensionError(f"linear: weight must be 2-D, got shape {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"linear: input axis -1 (size {x.shape[-1]}) != weight axis 0 (size {w.shape[0]})"
        )
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias shape {b.shape} != weight axis 1 ({w.shape[1]},)")
    x2 = x.data.reshape(-1, x.shape[-1])
    y = _rows_matmul(x2, w.data)
    if b is not None:
        y = y + b.data
    y = y.reshape(x.shape[:-1] + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(y, parents, bw, "linear")


def grouped_linear(x, w, b=None) -> Tensor:
    """Independent affine maps per group.

    x: (..., G, n); w: (G, n, m); b: (G, m). Output (..., G, m).
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 3 or x.ndim < 2 or x.shape[-2:] != w.shape[:2]:
        raise DimensionError(f"grouped_linear: input {x.shape} does not match weight {w.shape}")
    G, n, m = w.shape
    if b is not None:
        b = as_tensor(b)
        if b.shape != (G, m):
            raise DimensionError(f"grouped_linear: bias {b.shape} != {(G, m)}")
    x3 = x.data.reshape(-1, G, n)
    y = np.empty((x3.shape[0], G, m), dtype=x.dtype)
    for k in range(G):
        y[:, k] = _rows_matmul(x3[:, k], w.data[k])
    if b is not None:
        y += b.data
    y = y.reshape(x.shape[:-1] + (m,))

    def bw(g):
        g3 = g.reshape(-1, G, m)
        gx = gw = None
        if x.requires_grad:
            gx = np.empty_like(x3)
            for k in range(G):
                gx[:, k] = g3[:, k] @ w.data[k].T
            gx = gx.reshape(x.shape)
        if w.requires_grad:
            gw = np.stack([x3[:, k].T @ g3[:, k] for k in range(G)])
        if b is None:
            return gx, gw
        return gx, gw, g3.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(y, parents, bw, "grouped_linear")


# -- index / sparse ops --------------------------------------------------------


def _index_add(idx: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum ``values`` rows into ``n_rows`` buckets; fixed (sequential) order."""
    d = values.shape[-1]
    flat = (idx.reshape(-1, 1) * d + np.arange(d)).reshape(-1)
    out = np.bincount(flat, weights=values.reshape(-1), minlength=n_rows * d)
    return out.reshape(n_rows, d).astype(values.dtype, copy=False)


def take_rows(table, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table: ``table[idx]`` with shape idx.shape + (d,)."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take_rows: table must be 2-D, got {table.shape}")
    n = table.shape[0]

    def bw(g):
        return (_index_add(idx, g.reshape(-1, table.shape[1]), n),)

    return make_node(table.data[idx], (table,), bw, "take_rows")


def sparse_matmul(m, x) -> Tensor:
    """``m @ x`` with ``m`` a constant scipy sparse matrix and x of shape (n, d)."""
    x = as_tensor(x)
    if x.ndim != 2 or m.shape[1] != x.shape[0]:
        raise DimensionError(f"sparse_matmul: matrix {m.shape} vs operand {x.shape}")
    y = np.asarray(m @ x.data, dtype=x.dtype)

    def bw(g):
        return (np.asarray(m.T @ g, dtype=x.dtype),)

    return make_node(y, (x,), bw, "sparse_matmul")


def scatter_max(x, idx: np.ndarray, n_rows: int) -> Tensor:
    """Per-channel max of rows of x sharing a bucket; empty buckets are 0.

    The gradient goes to the lowest-indexed row attaining the max.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise DimensionError(f"scatter_max: features {x.shape} vs index {idx.shape}")
    d = x.shape[1]
    out = np.zeros((n_rows, d), dtype=x.dtype)
    if x.shape[0] == 0:
        return make_node(out, (x,), lambda g: (np.zeros_like(x.data),), "scatter_max")
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    xs = x.data[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    buckets = sidx[starts]
    seg_max = np.maximum.reduceat(xs, starts, axis=0)
    out[buckets] = seg_max
    seg_id = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(sidx)]))
    pos = np.where(xs == seg_max[seg_id], np.arange(len(sidx))[:, None], len(sidx))
    first = np.minimum.reduceat(pos, starts, axis=0)
    # a NaN maximum matches nothing; send its gradient to the segment's first row
    first = np.where(first == len(sidx), starts[:, None], first)
    arg_rows = order[first]  # (n_buckets, d)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[arg_rows, np.arange(d)[None, :]] = g[buckets]
        return (gx,)

    return make_node(out, (x,), bw, "scatter_max")


# -- grids ---------------------------------------------------------------------


def _pad(x: np.ndarray, p: int, spatial: range, mode: str) -> np.ndarray:
    width = [(0, 0)] * x.ndim
    for a in spatial:
        width[a] = (p, p)
    return np.pad(x, width, mode="wrap" if mode == "circular" else "constant")


def _unpad(g: np.ndarray, p: int, spatial: range, mode: str) -> np.ndarray:
    for a in spatial:
        n = g.shape[a]
        core = np.take(g, np.arange(p, n - p), axis=a)
        if mode == "circular":
            core = core.copy()
            m = core.shape[a]
            lo = [slice(None)] * g.ndim
            hi = [slice(None)] * g.ndim
            # padded head wraps to the tail of the core and vice versa
            lo[a], hi[a] = slice(0, p), slice(n - p, n)
            dst_tail = [slice(None)] * g.ndim
            dst_head = [slice(None)] * g.ndim
            dst_tail[a], dst_head[a] = slice(m - p, m), slice(0, p)
            core[tuple(dst_tail)] += g[tuple(lo)]
            core[tuple(dst_head)] += g[tuple(hi)]
        g = core
    return g


def conv(x, w, b=None, stride: int = 1, padding: str = "zero") -> Tensor:
    """Cross-correlation over 2 or 3 spatial axes, channels last.

    x: (B, *spatial, Cin); w: (k,)*dims + (Cin, Cout) with k odd; b: (Cout,).
    Stride 1 keeps the spatial shape, stride 2 halves it (rounding up).
    """
    x, w = as_tensor(x), as_tensor(w)
    dims = w.ndim - 2
    if dims not in (2, 3):
        raise DimensionError(f"conv: weight rank {w.ndim} is neither 4 (2-D) nor 5 (3-D)")
    k = w.shape[0]
    if any(s != k for s in w.shape[:dims]):
        raise ConfigError(f"conv: kernel must be cubic, got {w.shape[:dims]}")
    if k % 2 == 0:
        raise ConfigError(f"conv: kernel size {k} must be odd")
    if padding not in ("zero", "circular"):
        raise ConfigError(f"conv: unknown padding mode {padding!r}")
    if stride not in (1, 2):
        raise ConfigError(f"conv: stride {stride} not supported")
    if x.ndim != dims + 2:
        raise DimensionError(f"conv: input rank {x.ndim} != {dims + 2} for a {dims}-D kernel")
    cin, cout = w.shape[-2], w.shape[-1]
    if x.shape[-1] != cin:
        raise DimensionError(f"conv: input channels (axis -1) {x.shape[-1]} != kernel in-channels {cin}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise DimensionError(f"conv: bias {b.shape} != ({cout},)")

    p = k // 2
    spatial = range(1, dims + 1)
    in_sp = x.shape[1:-1]
    out_sp = tuple((n + stride - 1) // stride for n in in_sp)
    batch = x.shape[0]
    offsets = list(np.ndindex(*([k] * dims)))
    wk = w.data.reshape(-1, cin, cout)
    xp = _pad(x.data, p, spatial, padding)

    def window(o):
        sl = (slice(None),) + tuple(
            slice(o[a], o[a] + stride * (out_sp[a] - 1) + 1, stride) for a in range(dims)
        )
        return sl

    if stride == 1:
        return _conv_shifted(x, w, b, xp, wk, offsets, p, spatial, padding)

    n_out = batch * int(np.prod(out_sp))
    y = np.zeros((n_out, cout), dtype=x.dtype)
    for j, o in enumerate(offsets):
        cols = np.ascontiguousarray(xp[window(o)]).reshape(n_out, cin)
        y += cols @ wk[j]
    if b is not None:
        y += b.data
    y = y.reshape((batch,) + out_sp + (cout,))

    def bw(g):
        g2 = g.reshape(n_out, cout)
        gx = gw = None
        if w.requires_grad:
            gw = np.empty_like(wk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
        for j, o in enumerate(offsets):
            sl = window(o)
            if w.requires_grad:
                cols = np.ascontiguousarray(xp[sl]).reshape(n_out, cin)
                gw[j] = cols.T @ g2
            if x.requires_grad:
                gxp[sl] += (g2 @ wk[j].T).reshape((batch,) + out_sp + (cin,))
        if x.requires_grad:
            gx = _unpad(gxp, p, spatial, padding)
        if w.requires_grad:
            gw = gw.reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(y, parents, bw, f"conv{dims}d")


def _conv_shifted(x, w, b, xp, wk, offsets, p, spatial, padding) -> Tensor:
    """Stride-1 conv on the flattened padded input.

    Output anchor ``i`` (a flat index into the padded array) reads input row
    ``i + shift(o)`` for kernel offset ``o``, so every offset is one GEMM on a
    contiguous row slice. Anchors in the padding margin compute garbage that
    is cropped afterwards.
    """
    padded = xp.shape
    cin, cout = wk.shape[1:]
    sp_shape = padded[1:-1]
    strides = [int(np.prod(sp_shape[a + 1 :])) for a in range(len(sp_shape))]  # flat row strides
    shifts = [int(np.dot(o, strides)) for o in offsets]
    rows = int(np.prod(padded[:-1]))
    span = rows - shifts[-1]
    xf = xp.reshape(rows, cin)
    yf = np.zeros((rows, cout), dtype=x.dtype)
    for j, s in enumerate(shifts):
        yf[:span] += xf[s : s + span] @ wk[j]
    valid = (slice(None),) + tuple(slice(0, n) for n in x.shape[1:-1])
    y = yf.reshape(padded[:-1] + (cout,))[valid]
    if b is not None:
        y = y + b.data

    def bw(g):
        gf = np.zeros((rows, cout), dtype=g.dtype)
        gf.reshape(padded[:-1] + (cout,))[valid] = g
        gx = gw = None
        if w.requires_grad:
            gw = np.empty_like(wk)
        if x.requires_grad:
            gxf = np.zeros((rows, cin), dtype=g.dtype)
        for j, s in enumerate(shifts):
            if w.requires_grad:
                gw[j] = xf[s : s + span].T @ gf[:span]
            if x.requires_grad:
                gxf[s : s + span] += gf[:span] @ wk[j].T
        if x.requires_grad:
            gx = _unpad(gxf.reshape(padded), p, spatial, padding)
        if w.requires_grad:
            gw = gw.reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, cout).sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(np.ascontiguousarray(y), parents, bw, f"conv{len(spatial)}d")


def upsample_nearest(x, dims: int, factor: int = 2) -> Tensor:
    """Replicate each cell ``factor`` times along the trailing ``dims`` spatial axes.

    x: (B, *spatial, C).
    """
    x = as_tensor(x)
    if x.ndim != dims + 2:
        raise DimensionError(f"upsample_nearest: input rank {x.ndim} != {dims + 2}")
    y = x.data
    for a in range(1, dims + 1):
        y = np.repeat(y, factor, axis=a)

    def bw(g):
        shape = [x.shape[0]]
        for a in range(1, dims + 1):
            shape += [x.shape[a], factor]
        shape.append(x.shape[-1])
        g = g.reshape(shape)
        return (g.sum(axis=tuple(range(2, 2 * dims + 1, 2))),)

    return make_node(y, (x,), bw, "upsample_nearest")


def avg_pool(x, dims: int, factor: int = 2) -> Tensor:
    """Non-overlapping mean pooling over the ``dims`` spatial axes."""
    x = as_tensor(x)
    if x.ndim != dims + 2 or any(n % factor for n in x.shape[1:-1]):
        raise DimensionError(f"avg_pool: shape {x.shape} not divisible by {factor}")
    shape = [x.shape[0]]
    for a in range(1, dims + 1):
        shape += [x.shape[a] // factor, factor]
    shape.append(x.shape[-1])
    axes = tuple(range(2, 2 * dims + 1, 2))
    y = x.data.reshape(shape).mean(axis=axes)
    n = factor**dims

    def bw(g):
        g = g / n
        for a in range(1, dims + 1):
            g = np.repeat(g, factor, axis=a)
        return (g,)

    return make_node(y, (x,), bw, "avg_pool")


# -- loss ----------------------------------------------------------------------


def binary_cross_entropy(pred, target, eps: float = 1e-7) -> Tensor:
    """Summed BCE, with predictions clamped to [eps, 1 - eps].

    The gradient is zero wherever the clamp is active.
    """
    pred = as_tensor(pred)
    o = np.asarray(target, dtype=pred.dtype)
    if o.shape != pred.shape:
        raise DimensionError(f"binary_cross_entropy: target {o.shape} vs prediction {pred.shape}")
    if not np.all((o == 0) | (o == 1)):
        raise ContractError("binary_cross_entropy: targets must be 0 or 1")
    p = np.clip(pred.data, eps, 1 - eps)
    inside = (pred.data >= eps) & (pred.data <= 1 - eps)
    loss = -np.sum(o * np.log(p) + (1 - o) * np.log(1 - p))

    def bw(g):
        return (g * inside * (p - o) / (p * (1 - p)),)

    return make_node(np.asarray(loss, dtype=pred.dtype), (pred,), bw, "bce")
