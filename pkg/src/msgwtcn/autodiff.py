"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the forecasting network needs are provided. Each op
computes its value eagerly with numpy, remembers its inputs and a backward
rule, and appends itself to every active :class:`Tape`. :func:`backward`
walks a tape (or a topological sort of the graph) in reverse and
accumulates gradients into the leaf tensors that require them.

Broadcasting is deliberately narrow: ``add`` accepts a 1-D bias matching
the trailing dimension, ``matmul`` contracts a stack of vectors with a
single 2-D matrix; every other shape mismatch raises :class:`ShapeError`.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFinite, NonScalarLoss, ShapeError

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of the operations executed while it is active.

    Use as a context manager; ops append their output tensor in execution
    order, which is a valid topological order for the backward pass.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self):
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str) -> None:
    # the sum is a cheap screen; confirm elementwise before raising
    if not math.isfinite(float(np.sum(data))) and not np.isfinite(data).all():
        raise NonFinite(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.name = op
        for tape in _ACTIVE_TAPES:
            tape.nodes.append(out)
    return out


def _shape_err(op: str, *shapes) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {' , '.join(str(s) for s in shapes)}")


# elementwise arithmetic


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a 1-D bias over the trailing axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)), "add_bias")
    raise _shape_err("add", a.shape, b.shape)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise _shape_err("sub", a.shape, b.shape)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or tensor times a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim == 0 and not b.requires_grad:
        k = float(b.data)
        return _make(a.data * k, (a,), lambda g: (g * k,), "mul_scalar")
    if a.shape != b.shape:
        raise _shape_err("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale_rows(a, diag) -> Tensor:
    """``diag(d) @ a`` for a 2-D ``a``: row ``i`` scaled by ``d[i]``."""
    a, diag = _as_tensor(a), _as_tensor(diag)
    if a.ndim != 2 or diag.shape != (a.shape[0],):
        raise _shape_err("scale_rows", a.shape, diag.shape)
    ad, dd = a.data, diag.data

    def backward(g):
        return g * dd[:, None], np.sum(g * ad, axis=1)

    return _make(dd[:, None] * ad, (a, diag), backward, "scale_rows")


# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supported forms: ``(M,K) @ (K,F)``; ``(...,K) @ (K,F)`` (a stack of rows
    times one weight matrix); ``(M,K) @ (...,K,F)`` (one matrix applied to
    every matrix of a stack, used to mix graph nodes).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or (ad.ndim > 2 and bd.ndim > 2) or ad.shape[-1] != bd.shape[-2]:
        raise _shape_err("matmul", a.shape, b.shape)
    out = ad @ bd
    if ad.ndim == 2 and bd.ndim == 2:

        def backward(g):
            return g @ bd.T, ad.T @ g

    elif bd.ndim == 2:
        k, f = bd.shape

        def backward(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.reshape(-1, k).T @ g.reshape(-1, f) if b.requires_grad else None
            return ga, gb

    else:
        m, k = ad.shape

        def backward(g):
            ga = None
            if a.requires_grad:
                g2 = np.moveaxis(g, -2, 0).reshape(m, -1)
                b2 = np.moveaxis(bd, -2, 0).reshape(k, -1)
                ga = g2 @ b2.T
            gb = ad.T @ g if b.requires_grad else None
            return ga, gb

    return _make(out, (a, b), backward, "matmul")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def slice_axis(a, start: int, stop: int | None, axis: int) -> Tensor:
    """``a[..., start:stop, ...]`` along ``axis``."""
    a = _as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), backward, "slice")


def select(a, i: int, axis: int) -> Tensor:
    """Drop ``axis`` by taking position ``i`` along it."""
    a = _as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = i
    index = tuple(index)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), backward, "select")


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(ts), backward, "concat")


def sum(a) -> Tensor:  # noqa: A001 - mirrors the math name
    a = _as_tensor(a)
    shape = a.shape
    return _make(np.sum(a.data), (a,), lambda g: (np.full(shape, float(g)),), "sum")


# nonlinearities


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow in exp for large |x|
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def gated_activation(filt, gate) -> Tensor:
    """``tanh(filt) * sigmoid(gate)`` as a single node."""
    filt, gate = _as_tensor(filt), _as_tensor(gate)
    if filt.shape != gate.shape:
        raise _shape_err("gated_activation", filt.shape, gate.shape)
    th = np.tanh(filt.data)
    sg = _sigmoid(gate.data)

    def backward(g):
        return g * sg * (1.0 - th * th), g * th * sg * (1.0 - sg)

    return _make(th * sg, (filt, gate), backward, "gated_activation")


def dropout(a, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` at train time.

    In evaluation mode (or with ``p == 0``) the input tensor itself is
    returned.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    a = _as_tensor(a)
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(a.shape, dtype=np.float32) >= np.float32(p)) * (1.0 / (1.0 - p))
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# temporal convolution


def _conv_check(x: Tensor, fs: Sequence[Tensor], dilation: int, keep_last: int | None) -> int:
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    for f in fs:
        if x.ndim < 3 or f.ndim != 3 or f.shape[1] != x.shape[-1] or f.shape[2] < 1 or f.shape != fs[0].shape:
            raise _shape_err("temporal_conv", x.shape, f.shape)
    n_t = x.shape[1]
    n_out = n_t if keep_last is None else int(keep_last)
    if not 1 <= n_out <= n_t:
        raise ShapeError(f"temporal_conv: keep_last={keep_last} outside [1, {n_t}]")
    return n_out


def _im2col(xd: np.ndarray, dilation: int, width: int, n_out: int):
    """Stack the ``width`` dilated taps of the last ``n_out`` steps along
    the channel axis. Tap ``i`` reads ``x[t - dilation*i]`` (zero before 0)."""
    pad = dilation * (width - 1)
    if pad:
        widths = [(0, 0)] * xd.ndim
        widths[1] = (pad, 0)
        xp = np.pad(xd, widths)
    else:
        xp = xd
    first = pad + xd.shape[1] - n_out
    starts = [first - dilation * i for i in range(width)]
    cols = np.concatenate([xp[:, st:st + n_out] for st in starts], axis=-1)
    return cols, starts, pad, xp.shape


def _col2im(gcols: np.ndarray, starts, pad: int, xp_shape, c_in: int, n_out: int) -> np.ndarray:
    gxp = np.zeros(xp_shape)
    for i, st in enumerate(starts):
        gxp[:, st:st + n_out] += gcols[..., i * c_in:(i + 1) * c_in]
    return gxp[:, pad:]


def _tap_matrix(fd: np.ndarray) -> np.ndarray:
    # (C_out, C_in, W) -> (W*C_in, C_out), tap-major rows to match _im2col
    return np.ascontiguousarray(np.transpose(fd, (2, 1, 0)).reshape(-1, fd.shape[0]))


def _tap_grad(gw: np.ndarray, shape) -> np.ndarray:
    c_out, c_in, width = shape
    return np.ascontiguousarray(np.transpose(gw.reshape(width, c_in, c_out), (2, 1, 0)))


def temporal_conv(x, f, dilation: int, keep_last: int | None = None) -> Tensor:
    """Dilated causal convolution along axis 1 of a channels-last tensor.

    ``x`` has shape ``(B, T, ..., C_in)`` and ``f`` shape
    ``(C_out, C_in, width)``; ``out[:, t] = sum_i x[:, t - d*i] @ f[:, :, i].T``
    with zeros before the first time step. ``keep_last`` restricts the
    computation to the final time steps (the result is identical to slicing
    the full output).
    """
    x, f = _as_tensor(x), _as_tensor(f)
    n_out = _conv_check(x, [f], dilation, keep_last)
    c_out, c_in, width = f.shape
    cols, starts, pad, xp_shape = _im2col(x.data, dilation, width, n_out)
    wmat = _tap_matrix(f.data)
    cols2 = cols.reshape(-1, c_in * width)
    out = (cols2 @ wmat).reshape(cols.shape[:-1] + (c_out,))

    def backward(g):
        g2 = g.reshape(-1, c_out)
        gf = _tap_grad(cols2.T @ g2, f.shape) if f.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(cols.shape)
            gx = _col2im(gcols, starts, pad, xp_shape, c_in, n_out)
        return gx, gf

    return _make(out, (x, f), backward, "temporal_conv")


def gated_temporal_conv(x, f_filter, f_gate, dilation: int, keep_last: int | None = None) -> Tensor:
    """``tanh(conv(x, f_filter)) * sigmoid(conv(x, f_gate))`` as one node.

    Same semantics as composing :func:`temporal_conv` with
    :func:`gated_activation`, but both convolutions share one input
    unfolding and one matrix product.
    """
    x, f1, f2 = _as_tensor(x), _as_tensor(f_filter), _as_tensor(f_gate)
    n_out = _conv_check(x, [f1, f2], dilation, keep_last)
    c_out, c_in, width = f1.shape
    cols, starts, pad, xp_shape = _im2col(x.data, dilation, width, n_out)
    wmat = np.concatenate([_tap_matrix(f1.data), _tap_matrix(f2.data)], axis=1)
    cols2 = cols.reshape(-1, c_in * width)
    z = cols2 @ wmat
    th = np.tanh(z[:, :c_out])
    sg = _sigmoid(z[:, c_out:])
    out = (th * sg).reshape(cols.shape[:-1] + (c_out,))

    def backward(g):
        g2 = g.reshape(-1, c_out)
        gz = np.empty((g2.shape[0], 2 * c_out))
        ga, gb = gz[:, :c_out], gz[:, c_out:]
        t1 = g2 * sg
        np.multiply(th, th, out=ga)
        np.subtract(1.0, ga, out=ga)
        ga *= t1
        np.subtract(1.0, sg, out=gb)
        gb *= th
        gb *= t1
        gf1 = gf2 = gx = None
        if f1.requires_grad or f2.requires_grad:
            gw = cols2.T @ gz
            gf1 = _tap_grad(gw[:, :c_out], f1.shape)
            gf2 = _tap_grad(gw[:, c_out:], f2.shape)
        if x.requires_grad:
            gcols = (gz @ wmat.T).reshape(cols.shape)
            gx = _col2im(gcols, starts, pad, xp_shape, c_in, n_out)
        return gx, gf1, gf2

    return _make(out, (x, f1, f2), backward, "gated_temporal_conv")


def dilated_causal_conv1d(x, f, dilation: int) -> Tensor:
    """Causal convolution of ``x`` shaped ``(batch, C_in, time)``.

    Output has shape ``(batch, C_out, time)``: the input is left-padded with
    ``dilation * (width - 1)`` zeros so no output reads a future sample.
    """
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"dilated_causal_conv1d expects (batch, channels, time), got {x.shape}")
    y = temporal_conv(transpose(x, (0, 2, 1)), f, dilation)
    return transpose(y, (0, 2, 1))


# losses


def mse_loss(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise _shape_err("mse_loss", pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.size
    k = 2.0 / n

    def backward(g):
        gp = diff * (k * float(g))
        return gp, -gp

    return _make(np.mean(diff * diff), (pred, target), backward, "mse_loss")


# backward pass


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._backward is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every leaf
    tensor that requires a gradient.

    With a ``tape`` the recorded order is replayed in reverse; otherwise
    the order is recovered from the graph reachable from ``loss``.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is not None:
        if not any(n is loss for n in reversed(tape.nodes)):
            raise ValueError("loss was not recorded on the given tape")
        order = tape.nodes
    else:
        order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    n_samples: int = 200,
    seed: int = 0,
    norm: str = "component",
) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``f`` must be deterministic and return a scalar built from ``params``.
    Tensors with more than ``n_samples`` entries are checked on a random
    subset of ``n_samples`` coordinates.

    ``norm="component"`` scores each coordinate as
    ``|a - n| / max(1e-8, |a| + |n|)``. ``norm="tensor"`` scores each tensor
    as ``max |a - n| / max |n|`` over its sampled coordinates, which stays
    meaningful when some entries sit below the difference quotient's
    rounding floor (about ``2.2e-16 * |f| / eps``).
    """
    if norm not in ("component", "tensor"):
        raise ValueError(f"norm must be 'component' or 'tensor', got {norm!r}")
    params = list(params)
    for p in params:
        p.grad = None
    backward(f())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        size = p.data.size
        coords = np.arange(size) if size <= n_samples else rng.choice(size, n_samples, replace=False)
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        num = np.empty(len(coords))
        for i, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            hi = f().item()
            flat[c] = orig - eps
            lo = f().item()
            flat[c] = orig
            num[i] = (hi - lo) / (2.0 * eps)
        ana = analytic.reshape(-1)[coords]
        diff = np.abs(ana - num)
        if norm == "component":
            err = float(np.max(diff / np.maximum(1e-8, np.abs(ana) + np.abs(num))))
        else:
            scale = float(np.max(np.abs(num)))
            err = float(np.max(diff)) / scale if scale > 0 else float(np.max(diff) > 0)
        worst = max(worst, err)
    return worst
