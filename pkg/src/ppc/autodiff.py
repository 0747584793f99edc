"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

A :class:`Tape` records every operation executed while it is active; calling
:func:`backward` on a scalar result replays the records in reverse and
accumulates gradients into the ``grad`` buffers of the participating leaf
tensors.  The engine is deliberately small: dynamic tape, no graph
optimization, single-threaded per tape.

Default precision is 32-bit; pass ``dtype=np.float64`` when creating leaves
to run a graph at 64-bit (used by the finite-difference checks).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "backward",
    "op_forward",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv1d",
    "maxpool1d",
    "nearest_upsample1d",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "square",
    "reduce_sum",
    "reduce_mean",
    "concat",
    "slice_",
    "batchnorm",
]

# Finiteness is part of the forward contract: NaN/Inf anywhere is an error
# state.  The flag exists so benchmarks can switch the check off explicitly.
CHECK_FINITE = True


class ShapeError(ValueError):
    """Operand shapes are invalid for the requested operation."""


class NumericError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class Tensor:
    """Dense real tensor with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "kind")

    def __init__(self, out, parents, backward_fn, kind):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.kind = kind


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of operations; context manager activates recording."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _current_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(kind: str, out_data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NumericError(f"{kind}: non-finite value in output")
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = _current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, parents, backward_fn, kind))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}")
    return _finish(
        "add", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}")
    return _finish(
        "sub", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}")
    return _finish(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _finish(
        "matmul", out, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _finish("relu", out, (x,), lambda g: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    # Stable in both tails: exp of a non-positive argument only.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _finish("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _finish("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _finish("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(x.data)
    return _finish("log", out, (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = x.data * x.data
    return _finish("square", out, (x,), lambda g: (g * 2.0 * x.data,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _restore_axes(g: np.ndarray, shape: tuple, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape).copy()


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))
    return _finish(
        "reduce_sum", out, (x,), lambda g: (_restore_axes(g, x.shape, axis),)
    )


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis))
    count = x.data.size if axis is None else x.data.size // out.size
    return _finish(
        "reduce_mean", out, (x,),
        lambda g: (_restore_axes(g, x.shape, axis) / count,),
    )


def concat(xs: list[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ShapeError("concat: empty input list")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}")
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish("concat", out, tuple(xs), bwd)


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= x.shape[axis]):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx].copy()

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _finish("slice", out, (x,), bwd)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)
    return _finish("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------------------
# 1-D signal ops: all operate on [batch, channels, length] arrays


def _pad_length(x: np.ndarray, pad: int) -> np.ndarray:
    b, c, length = x.shape
    xpad = np.zeros((b, c, length + 2 * pad), dtype=x.dtype)
    xpad[:, :, pad:length + pad] = x
    return xpad


def _im2col(xpad: np.ndarray, k: int, length: int) -> np.ndarray:
    """Kernel-tap patches of the padded input as one [C*K, B*L] matrix."""
    b, c, _ = xpad.shape
    cols = np.empty((c, k, b, length), dtype=xpad.dtype)
    for kk in range(k):
        cols[:, kk] = xpad[:, :, kk:kk + length].transpose(1, 0, 2)
    return cols.reshape(c * k, b * length)


def _corr_same(x: np.ndarray, w: np.ndarray):
    """Cross-correlation with stride 1 and zero "same" padding.

    x: [B, C, L], w: [F, C, K] with K odd.  The batch and length axes are
    flattened together so the whole convolution is a single [F, C*K] x
    [C*K, B*L] matrix product; hundreds of per-item small products would
    be dominated by call overhead.  Returns ([B, F, L], patch matrix)
    with the patches reused by backward.
    """
    b, c, length = x.shape
    f, _, k = w.shape
    xpad = _pad_length(x, k // 2)
    cols = _im2col(xpad, k, length)
    out2 = np.matmul(w.reshape(f, c * k), cols)
    out = np.ascontiguousarray(out2.reshape(f, b, length).transpose(1, 0, 2))
    return out, cols


def conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Same-padded stride-1 cross-correlation of [B, C, L] with [F, C, K]."""
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv1d: need [B,C,L] and [F,C,K], got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: channel mismatch {x.shape} vs {w.shape}")
    if w.shape[2] % 2 == 0:
        raise ShapeError(f"conv1d: kernel size must be odd, got {w.shape[2]}")
    out, cols = _corr_same(x.data, w.data)
    f, c, k = w.shape
    b, _, length = x.shape

    def bwd(g):
        g2 = g.transpose(1, 0, 2).reshape(f, b * length)
        gw = np.matmul(g2, cols.T).reshape(f, c, k)
        # the adjoint of same-padded correlation is same-padded correlation
        # with the kernel transposed and flipped along the tap axis
        wt = np.ascontiguousarray(w.data.transpose(1, 0, 2)[:, :, ::-1])
        gx, _ = _corr_same(g, wt)
        return (gx, gw)

    return _finish("conv1d", out, (x, w), bwd)


def maxpool1d(x: Tensor, pool: int) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool1d: need [B,C,L], got {x.shape}")
    b, c, length = x.shape
    if pool < 1 or length % pool != 0:
        raise ShapeError(f"maxpool1d: pool {pool} does not divide length {length}")
    win = x.data.reshape(b, c, length // pool, pool)
    out = win.max(axis=3)

    def bwd(g):
        arg = win.argmax(axis=3)
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=3)
        return (gwin.reshape(b, c, length),)

    return _finish("maxpool1d", out, (x,), bwd)


def nearest_upsample1d(x: Tensor, factor: int) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError(f"nearest_upsample1d: need [B,C,L], got {x.shape}")
    if factor < 1:
        raise ShapeError(f"nearest_upsample1d: factor must be >= 1, got {factor}")
    b, c, length = x.shape
    out = np.repeat(x.data, factor, axis=2)

    def bwd(g):
        return (g.reshape(b, c, length, factor).sum(axis=3),)

    return _finish("nearest_upsample1d", out, (x,), bwd)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    training: bool,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    eps: float = 1e-5,
):
    """Per-channel batch normalization of [B, C, L].

    Training mode normalizes with batch statistics over the (B, L) axes and
    returns ``(out, batch_mean, batch_var)`` so the caller can update running
    statistics.  Inference mode normalizes with the supplied running
    statistics (treated as constants) and returns just the output tensor.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"batchnorm: need [B,C,L], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({c},)")
    gm = gamma.data.reshape(1, c, 1)
    bt = beta.data.reshape(1, c, 1)
    if training:
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(1, c, 1)) * inv.reshape(1, c, 1)
        out_data = gm * xhat + bt
        m = x.data.shape[0] * x.data.shape[2]

        def bwd(g):
            ggamma = (g * xhat).sum(axis=(0, 2))
            gbeta = g.sum(axis=(0, 2))
            gs = g.sum(axis=(0, 2), keepdims=True)
            gxs = (g * xhat).sum(axis=(0, 2), keepdims=True)
            gx = (gm * inv.reshape(1, c, 1) / m) * (m * g - gs - xhat * gxs)
            return (gx, ggamma, gbeta)

        out = _finish("batchnorm", out_data, (x, gamma, beta), bwd)
        return out, mean, var

    if running_mean is None or running_var is None:
        raise ShapeError("batchnorm: inference mode requires running statistics")
    inv = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1)
    rm = running_mean.reshape(1, c, 1)
    out_data = gm * (x.data - rm) * inv + bt

    def bwd_inf(g):
        ggamma = (g * (x.data - rm) * inv).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        gx = g * gm * inv
        return (gx, ggamma, gbeta)

    return _finish("batchnorm", out_data, (x, gamma, beta), bwd_inf)


# ---------------------------------------------------------------------------
# generic dispatch and backward pass

_OP_TABLE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "square": square,
}


def op_forward(tape: Tape, kind: str, inputs: list[Tensor], attrs: dict | None = None) -> Tensor:
    """Run one recorded operation on an explicit tape.

    Thin dispatcher over the op functions; ``attrs`` carries the non-tensor
    arguments (axis, pool size, upsample factor, slice bounds, batchnorm
    mode).
    """
    attrs = attrs or {}
    with tape:
        if kind in _OP_TABLE:
            return _OP_TABLE[kind](*inputs)
        if kind == "conv1d":
            return conv1d(*inputs)
        if kind == "maxpool1d":
            return maxpool1d(inputs[0], attrs["pool"])
        if kind == "nearest_upsample1d":
            return nearest_upsample1d(inputs[0], attrs["factor"])
        if kind == "reduce_sum":
            return reduce_sum(inputs[0], attrs.get("axis"))
        if kind == "reduce_mean":
            return reduce_mean(inputs[0], attrs.get("axis"))
        if kind == "concat":
            return concat(list(inputs), attrs.get("axis", 0))
        if kind == "slice":
            return slice_(inputs[0], attrs["axis"], attrs["start"], attrs["stop"])
        if kind == "reshape":
            return reshape(inputs[0], attrs["shape"])
        if kind == "batchnorm":
            res = batchnorm(
                inputs[0], inputs[1], inputs[2],
                training=attrs.get("training", True),
                running_mean=attrs.get("running_mean"),
                running_var=attrs.get("running_var"),
                eps=attrs.get("eps", 1e-5),
            )
            return res[0] if isinstance(res, tuple) else res
    raise ValueError(f"op_forward: unknown op kind {kind!r}")


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf on the tape.

    Repeated calls accumulate; zero the leaf grads between passes if that is
    not wanted.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not tape.nodes:
        raise ValueError("backward: tape is empty")
    produced = {id(n.out) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if not parent.requires_grad:
                continue
            if id(parent) in produced:
                pid = id(parent)
                if pid in grads:
                    grads[pid] += pg
                else:
                    grads[pid] = pg
            else:
                parent.accumulate_grad(pg)
