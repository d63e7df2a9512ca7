"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its inputs and a backward closure on the output tensor.  A
:class:`Tape` is the topologically ordered list of nodes reachable from a
scalar loss; :func:`backward` walks it once in reverse.  Nothing is retained
globally, so a tape lives exactly as long as the loss tensor that roots it.

Spatial ops accept per-sample ``C x H x W`` tensors or batched
``B x C x H x W`` tensors.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS = 1e-12
"""Clamp applied inside every logarithm."""

_node_ids = itertools.count()


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class Tensor:
    """A float64 array plus the autodiff bookkeeping needed to differentiate it.

    Args:
        data: anything ``np.asarray`` accepts; stored as a contiguous float64 copy.
        requires_grad: mark as a differentiable leaf (a parameter).
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = _parents
        self._op = _op
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # always C order: numpy reductions sum in stride order, so a layout
        # change would perturb the last bits of downstream gradients
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, order="C").reshape(self.shape)
        else:
            self.grad = np.ascontiguousarray(self.grad + g)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a Python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_node_ids)
    out._op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op} produced non-finite values")


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_pair(a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if a.size == 1:
        return b.shape
    if b.size == 1:
        return a.shape
    raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b))

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a))
        if b.requires_grad:
            b._accumulate(_reduce_to(-g, b))

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b))

    return _make(a.data * b.data, (a, b), "mul", backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: a._accumulate(-g))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    # np.maximum keeps NaN visible instead of hiding it behind the mask
    return _make(np.maximum(a.data, 0.0), (a,), "relu", lambda g: a._accumulate(g * mask))


def log(a, eps: float = EPS) -> Tensor:
    """Natural log of ``max(a, eps)``; the clamp has zero gradient."""
    a = as_tensor(a)
    _check_finite(a.data, "log input")
    clamped = np.maximum(a.data, eps)
    live = a.data > eps

    def backward(g):
        a._accumulate(np.where(live, g / clamped, 0.0))

    return _make(np.log(clamped), (a,), "log", backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), "clip", lambda g: a._accumulate(np.where(inside, g, 0.0)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite(out, "exp")
    return _make(out, (a,), "exp", lambda g: a._accumulate(g * out))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "neg": neg, "relu": relu, "log": log, "exp": exp}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch one of ``add, sub, mul, neg, relu, log, exp`` by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# shape plumbing and reductions


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), "reshape", lambda g: a._accumulate(g.reshape(a.shape)))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if axis is None and not keepdims:
        out = np.asarray(out).reshape(1)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g.reshape(-1)[0], a.shape))
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, a.shape))

    return _make(np.asarray(out, dtype=np.float64), (a,), "sum", backward)


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return tsum(a) / a.size


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions (if any) are treated as a batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), "matmul", backward)


# ---------------------------------------------------------------------------
# spatial ops


def _as_batched(x: Tensor, op: str) -> bool:
    if x.data.ndim == 3:
        return False
    if x.data.ndim == 4:
        return True
    raise ShapeError(f"{op} expects C x H x W or B x C x H x W, got {x.shape}")


def conv2d(x, w, bias) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (cross-correlation convention)."""
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    batched = _as_batched(x, "conv2d")
    xd = x.data if batched else x.data[None]
    if w.data.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d weight must be C_out x C_in x 3 x 3, got {w.shape}")
    c_out, c_in = w.shape[:2]
    if xd.shape[1] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {xd.shape[1]}, weight expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # cols: B x C_in x H x W x 3 x 3
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))
    out = np.einsum("bchwij,ocij->bohw", cols, w.data, optimize=True)
    out = out + bias.data[None, :, None, None]

    def backward(g):
        gb = g if batched else g[None]
        if w.requires_grad:
            w._accumulate(np.einsum("bohw,bchwij->ocij", gb, cols, optimize=True))
        if bias.requires_grad:
            bias._accumulate(gb.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gp = np.pad(gb, ((0, 0), (0, 0), (1, 1), (1, 1)))
            gcols = sliding_window_view(gp, (3, 3), axis=(2, 3))
            wf = w.data[:, :, ::-1, ::-1]
            gx = np.einsum("bohwij,ocij->bchw", gcols, wf, optimize=True)
            x._accumulate(gx if batched else gx[0])

    return _make(out if batched else out[0], (x, w, bias), "conv2d", backward)


def conv1x1(x, w, bias) -> Tensor:
    """Pointwise channel mixing: ``w`` is C_out x C_in, ``bias`` is C_out."""
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    batched = _as_batched(x, "conv1x1")
    xd = x.data if batched else x.data[None]
    if w.data.ndim != 2 or xd.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1x1 channel mismatch: input {x.shape}, weight {w.shape}")
    if bias.shape != (w.shape[0],):
        raise ShapeError(f"conv1x1 bias must have shape ({w.shape[0]},), got {bias.shape}")
    out = np.einsum("oc,bchw->bohw", w.data, xd) + bias.data[None, :, None, None]

    def backward(g):
        gb = g if batched else g[None]
        if w.requires_grad:
            w._accumulate(np.einsum("bohw,bchw->oc", gb, xd))
        if bias.requires_grad:
            bias._accumulate(gb.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = np.einsum("oc,bohw->bchw", w.data, gb)
            x._accumulate(gx if batched else gx[0])

    return _make(out if batched else out[0], (x, w, bias), "conv1x1", backward)


def maxpool2(x) -> Tensor:
    """2x2 non-overlapping max pool.  Ties go to the first element in row-major window order."""
    x = as_tensor(x)
    batched = _as_batched(x, "maxpool2")
    xd = x.data if batched else x.data[None]
    b, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = xd.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = g if batched else g[None]
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], gb[..., None], axis=-1)
        gx = gw.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        x._accumulate(gx if batched else gx[0])

    return _make(out if batched else out[0], (x,), "maxpool2", backward)


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic 1-D interpolation matrix (align_corners=False, edge clamped)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def upsample_bilinear(x, H: int, W: int) -> Tensor:
    x = as_tensor(x)
    batched = _as_batched(x, "upsample_bilinear")
    h, w = x.shape[-2:]
    if H < h or W < w:
        raise ShapeError(f"upsample target {H}x{W} smaller than source {h}x{w}")
    if (H, W) == (h, w):
        return _make(x.data.copy(), (x,), "upsample", lambda g: x._accumulate(g))
    ry = bilinear_matrix(H, h)
    rx = bilinear_matrix(W, w)
    out = ry @ x.data @ rx.T

    def backward(g):
        x._accumulate(ry.T @ g @ rx)

    return _make(out, (x,), "upsample", backward)


# ---------------------------------------------------------------------------
# softmax family


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def softmax(x, axis: int) -> Tensor:
    x = as_tensor(x)
    axis = _norm_axis(axis, x.data.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _make(p, (x,), "softmax", backward)


def log_softmax(x, axis: int) -> Tensor:
    x = as_tensor(x)
    axis = _norm_axis(axis, x.data.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        x._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), "log_softmax", backward)


# ---------------------------------------------------------------------------
# tape and backward


class Tape:
    """Ops reachable from ``root``, in creation order (inputs before outputs).

    Creation order is a topological order that does not depend on how the
    graph is traversed, so a node with several consumers always sums their
    contributions in the same order, however much unrelated graph hangs off
    the loss.
    """

    def __init__(self, root: Tensor):
        self.root = root
        found: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if node.node_id in found:
                continue
            found[node.node_id] = node
            stack.extend(p for p in node._parents if p.node_id not in found)
        self.nodes: list[Tensor] = [found[k] for k in sorted(found)]

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every differentiable ancestor of a scalar ``loss``.

    Leaf gradients accumulate across calls until :meth:`Tensor.zero_grad`;
    intermediate gradients are scratch and are released afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any differentiable tensor")
    if loss._backward is None:
        loss._accumulate(np.ones_like(loss.data))
        return
    tape = Tape(loss)
    interior = [n for n in tape if n._backward is not None]
    for n in interior:
        n.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for n in interior:
        n.grad = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
