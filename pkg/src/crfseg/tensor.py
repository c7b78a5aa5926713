"""Dense tensors with reverse-mode automatic differentiation.

Every tensor produced by an operation remembers its parents and a closure that
maps the output gradient to parent gradients.  ``backward`` sorts the recorded
graph topologically and replays those closures in reverse order.

Storage is float32 by default.  Explicit reductions (sums, means, batch
statistics, softmax normalizers) accumulate in float64.  ``precision`` switches
the default dtype, which the finite-difference checks use to run a graph in
float64 end to end.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32

DIRECTIONS = ("up", "right", "down", "left")


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out.name = None
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def backward(self, wrt: Iterable["Tensor"] | None = None) -> None:
        backward(self, wrt)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# graph replay


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    When ``wrt`` is given, only the part of the graph leading to those leaves is
    replayed and only their ``.grad`` is touched.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)

    targets = None
    if wrt is not None:
        targets = {id(t) for t in wrt}
        needed: set[int] = set()
        for node in order:  # parents come before children
            if id(node) in targets or any(id(p) in needed for p in node._parents):
                needed.add(id(node))
        order = [n for n in order if id(n) in needed]
        if not order or order[-1] is not loss:
            return

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if targets is None or id(node) in targets:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if targets is not None and p._backward is None and id(p) not in targets:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad(loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``leaves``; unreachable leaves get zeros."""
    saved = [leaf.grad for leaf in leaves]
    for leaf in leaves:
        leaf.grad = None
    backward(loss, wrt=leaves)
    out = []
    for leaf, old in zip(leaves, saved):
        out.append(np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad)
        leaf.grad = old
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def sum_all(a: Tensor) -> Tensor:
    s = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    shape = a.shape
    return _make(s, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    m = np.asarray(a.data.mean(dtype=np.float64), dtype=a.data.dtype)
    shape = a.shape
    return _make(m, (a,), lambda g: (np.full(shape, g / n, dtype=a.data.dtype),))


def sum_axes(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = a.data.sum(axis=axes, dtype=np.float64).astype(a.data.dtype)
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _make(out, (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts)))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def concat_channels(ts: Sequence[Tensor]) -> Tensor:
    return concat(ts, axis=1)


def channel_slice(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop], (a,), bw)


def flip_width(a: Tensor) -> Tensor:
    return _make(a.data[..., ::-1].copy(), (a,), lambda g: (g[..., ::-1].copy(),))


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    factor = np.where(mask, 1.0, slope).astype(a.data.dtype)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    z = np.exp(-np.abs(x))  # never overflows
    s = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    # keep the output strictly inside (0, 1) where the float format would round to an endpoint
    s = np.clip(s, np.nextafter(x.dtype.type(0), x.dtype.type(1)), np.nextafter(x.dtype.type(1), x.dtype.type(0)))
    return _make(s, (a,), lambda g: (g * s * (1 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1 - t * t),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with the input clamped from below; clamped sites pass no gradient."""
    x = a.data
    clamped = np.maximum(x, floor)
    live = x >= floor
    return _make(np.log(clamped), (a,), lambda g: (np.where(live, g / clamped, 0).astype(x.dtype),))


def activation(a: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return tanh(a)
    if kind == "exp":
        return exp(a)
    raise ValueError(f"unknown activation {kind!r}")


def gated_activation(filter_pre: Tensor, gate_pre: Tensor) -> Tensor:
    if filter_pre.shape != gate_pre.shape:
        raise ShapeError(f"filter {filter_pre.shape} and gate {gate_pre.shape} differ")
    return mul(tanh(filter_pre), sigmoid(gate_pre))


def softmax_channels(a: Tensor) -> Tensor:
    """Softmax over axis 1 of an N×P×H×W tensor."""
    x = a.data
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z.astype(np.float64))
    s = (e / e.sum(axis=1, keepdims=True)).astype(x.dtype)

    def bw(g):
        dot = (g * s).sum(axis=1, keepdims=True, dtype=np.float64).astype(x.dtype)
        return (s * (g - dot),)

    return _make(s, (a,), bw)


# ---------------------------------------------------------------------------
# convolution


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _conv_geometry(x: Tensor, w: Tensor, stride, pad, dilation):
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    dh, dw = _pair(dilation)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d wants 4-D input and kernels, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"input has {c} channels but kernels expect {ci}")
    if min(kh, kw, dh, dw, sh, sw) < 1:
        raise ShapeError("kernel size, stride and dilation must be positive")
    ext_h, ext_w = (kh - 1) * dh + 1, (kw - 1) * dw + 1
    if ext_h > h + 2 * ph or ext_w > wd + 2 * pw:
        raise ShapeError(f"effective kernel {ext_h}x{ext_w} exceeds padded input")
    ho = (h + 2 * ph - ext_h) // sh + 1
    wo = (wd + 2 * pw - ext_w) // sw + 1
    return (sh, sw), (ph, pw), (dh, dw), ho, wo


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, pad=0, dilation=1, method: str = "lowered") -> Tensor:
    """2-D cross-correlation with zero padding.

    ``method="direct"`` accumulates one kernel tap at a time (the reference
    path).  ``method="lowered"`` gathers all taps into a column matrix and does
    one batched matrix product; it agrees with the direct path up to float
    reassociation.
    """
    geom = _conv_geometry(x, w, stride, pad, dilation)
    if method == "direct":
        return _conv_direct(x, w, b, *geom)
    if method == "lowered":
        return _conv_lowered(x, w, b, *geom)
    raise ValueError(f"unknown conv method {method!r}")


def _padded(xd: np.ndarray, ph: int, pw: int) -> np.ndarray:
    return np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd


def _tap_window(i, j, dil, stride, ho, wo):
    r, s = i * dil[0], j * dil[1]
    return (
        slice(None),
        slice(None),
        slice(r, r + (ho - 1) * stride[0] + 1, stride[0]),
        slice(s, s + (wo - 1) * stride[1] + 1, stride[1]),
    )


def _bias_grad(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)


def _conv_direct(x, w, b, stride, pad, dil, ho, wo) -> Tensor:
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xd, wdat = x.data, w.data
    xp = _padded(xd, *pad)

    out = np.zeros((o, n, ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(wdat[:, :, i, j], xp[_tap_window(i, j, dil, stride, ho, wo)], axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gt = g.transpose(1, 0, 2, 3)  # o, n, ho, wo
        gw = np.zeros_like(wdat) if w.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                win = _tap_window(i, j, dil, stride, ho, wo)
                if gw is not None:
                    gw[:, :, i, j] = np.tensordot(gt, xp[win], axes=([1, 2, 3], [0, 2, 3]))
                if gxp is not None:
                    gxp[win] += np.tensordot(wdat[:, :, i, j], gt, axes=([0], [0])).transpose(1, 0, 2, 3)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, pad[0]:pad[0] + h, pad[1]:pad[1] + wd] if pad != (0, 0) else gxp
        return (gx, gw) if b is None else (gx, gw, _bias_grad(g))

    return _make(out, (x, w) if b is None else (x, w, b), bw)


def _im2col(xp: np.ndarray, kh, kw, dil, stride, ho, wo) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh * kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = xp[_tap_window(i, j, dil, stride, ho, wo)]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _conv_lowered(x, w, b, stride, pad, dil, ho, wo) -> Tensor:
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xd = x.data
    w2 = w.data.reshape(o, c * kh * kw)
    pointwise = kh == kw == 1 and pad == (0, 0) and stride == (1, 1)
    if pointwise:
        cols = np.ascontiguousarray(xd).reshape(n, c, h * wd)
    else:
        cols = _im2col(_padded(xd, *pad), kh, kw, dil, stride, ho, wo)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data.reshape(1, -1, 1)
    out = out.reshape(n, o, ho, wo)

    def bw(g):
        g3 = g.reshape(n, o, ho * wo)
        gx = gw = None
        if w.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3)
            if pointwise:
                gx = gcols.reshape(n, c, h, wd)
            else:
                gcols = gcols.reshape(n, c, kh * kw, ho, wo)
                gxp = np.zeros((n, c, h + 2 * pad[0], wd + 2 * pad[1]), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[_tap_window(i, j, dil, stride, ho, wo)] += gcols[:, :, i * kw + j]
                gx = gxp[:, :, pad[0]:pad[0] + h, pad[1]:pad[1] + wd]
        return (gx, gw) if b is None else (gx, gw, _bias_grad(g))

    return _make(out, (x, w) if b is None else (x, w, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x: N×C, w: O×C -> N×O."""
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: {x.shape} against weights {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def bw(g):
        grads = [g @ wd, g.T @ xd]
        if b is not None:
            grads.append(g.sum(axis=0, dtype=np.float64).astype(g.dtype))
        return grads

    return _make(out, (x, w) if b is None else (x, w, b), bw)


# ---------------------------------------------------------------------------
# spatial helpers


def _shift_array(x: np.ndarray, direction: str) -> np.ndarray:
    out = np.zeros_like(x)
    if direction == "up":
        out[..., :-1, :] = x[..., 1:, :]
    elif direction == "down":
        out[..., 1:, :] = x[..., :-1, :]
    elif direction == "left":
        out[..., :, :-1] = x[..., :, 1:]
    elif direction == "right":
        out[..., :, 1:] = x[..., :, :-1]
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return out


_OPPOSITE = {"up": "down", "down": "up", "left": "right", "right": "left"}


def spatial_shift(x: Tensor, direction: str) -> Tensor:
    """Move content one pixel in ``direction``; the vacated border is zero."""
    return _make(_shift_array(x.data, direction), (x,), lambda g: (_shift_array(g, _OPPOSITE[direction]),))


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.data.dtype)
    return _make(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(g.dtype),))


class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    def __init__(self, channels: int, momentum: float = 0.9):
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str = "train",
    running: RunningStats | None = None,
    eps: float = 1e-5,
) -> Tensor:
    n, c, h, w = x.shape
    xd = x.data
    if mode == "train":
        if n * h * w < 2:
            raise ShapeError("batch_norm in train mode needs at least 2 values per channel")
        mu = xd.mean(axis=(0, 2, 3), dtype=np.float64)
        var = xd.var(axis=(0, 2, 3), dtype=np.float64)
        if running is not None:
            m = running.momentum
            running.mean = (m * running.mean + (1 - m) * mu).astype(np.float32)
            running.var = (m * running.var + (1 - m) * var * (n * h * w) / max(n * h * w - 1, 1)).astype(np.float32)
    elif mode == "infer":
        if running is None:
            raise ValueError("infer mode needs running statistics")
        mu = running.mean.astype(np.float64)
        var = running.var.astype(np.float64)
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype).reshape(1, c, 1, 1)
    xhat = (xd - mu.astype(xd.dtype).reshape(1, c, 1, 1)) * inv
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
        gbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
        gxhat = g * gd
        if mode == "train":
            mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True, dtype=np.float64).astype(g.dtype)
            mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True, dtype=np.float64).astype(g.dtype)
            gx = inv * (gxhat - mean_g - xhat * mean_gx)
        else:
            gx = gxhat * inv
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw)
