"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major numpy array. Operations on tensors
that require gradients record a :class:`Node` (operation kind, parent
tensors, vector-Jacobian product) so that :func:`backward` can replay the
computation in reverse. The recorded graph is the tape: nodes are created
in evaluation order, every node's inputs precede it, and backward visits
each node exactly once.

Everything is float64. Gradients accumulate by summation; call
``zero_grad`` (or :func:`zero_grads`) between steps. ``relu`` uses the
subgradient 0 at exactly 0, and broadcasting is supported for the scalar
and trailing-dimension cases only.
"""

from __future__ import annotations

import builtins
import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's shape rule."""


class UnknownOpError(ValueError):
    """Raised by :func:`apply` for an unrecognized op kind."""


class Node:
    """One tape record: op kind, parent tensors and the backward closure.

    ``vjp(out_grad)`` returns one gradient array (or None) per parent.
    """

    __slots__ = ("kind", "parents", "vjp")

    def __init__(self, kind: str, parents: tuple["Tensor", ...],
                 vjp: Callable[[np.ndarray], tuple]):
        self.kind = kind
        self.parents = parents
        self.vjp = vjp


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; floats are accepted where a plain scale suffices
    def __add__(self, other): return add(self, _as_tensor(other))
    def __sub__(self, other): return sub(self, _as_tensor(other))
    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)
    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(_as_tensor(other), self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def tensor(data) -> Tensor:
    """Constant tensor (no gradient)."""
    return Tensor(data)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


def parameter(data) -> Tensor:
    """Leaf tensor that participates in optimization: grad buffer preallocated."""
    t = Tensor(data, requires_grad=True)
    t.grad = np.zeros_like(t.data)
    return t


def uniform_init(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    """Parameter drawn uniformly from [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


def _result(data: np.ndarray, kind: str, parents: tuple[Tensor, ...],
            vjp: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(data)
    if builtins.any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(kind, parents, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.data + b.data, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result(a.data - b.data, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _result(a.data * b.data, "mul", (a, b), vjp)


def scale(a: Tensor, factor: float) -> Tensor:
    f = float(factor)
    return _result(a.data * f, "scale", (a,), lambda g: (g * f,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _result(out, "reciprocal", (a,), lambda g: (-g * out * out,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the bounds."""
    mask = (a.data > lo) & (a.data < hi)
    return _result(np.clip(a.data, lo, hi), "clip", (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape / linear-algebra ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    def vjp(g):
        return g @ b.data.T, a.data.T @ g
    return _result(a.data @ b.data, "matmul", (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected rank-2 tensor, got shape {a.shape}")
    return _result(np.ascontiguousarray(a.data.T), "transpose", (a,),
                   lambda g: (np.ascontiguousarray(g.T),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}")
    return _result(a.data.reshape(shape), "reshape", (a,),
                   lambda g: (g.reshape(a.shape),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: shape {a.shape} does not broadcast to {shape}") from None
    return _result(np.ascontiguousarray(out), "broadcast", (a,),
                   lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    first = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(first) or builtins.any(
                t.shape[d] != first[d] for d in range(len(first)) if d != axis % len(first)):
            raise ShapeError(f"concat: shapes {first} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def vjp(g):
        return tuple(np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
                     for i in range(len(tensors)))
    return _result(np.concatenate([t.data for t in tensors], axis=axis),
                   "concat", tuple(tensors), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Static slice of ``length`` entries along ``axis`` starting at ``start``."""
    if axis >= a.data.ndim or start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: window [{start}:{start + length}] on axis {axis} "
                         f"exceeds shape {a.shape}")
    idx = tuple(slice(None) if d != axis else slice(start, start + length)
                for d in range(a.data.ndim))
    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)
    return _result(np.ascontiguousarray(a.data[idx]), "narrow", (a,), vjp)


def slice_window(a: Tensor, row: int, col: int, k: int) -> Tensor:
    """k x k spatial window of a C x H x W map at top-left (row, col)."""
    c, h, w = a.shape
    if row < 0 or col < 0 or row + k > h or col + k > w:
        raise ShapeError(f"slice_window: {k}x{k} window at ({row}, {col}) "
                         f"exceeds shape {a.shape}")
    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, row:row + k, col:col + k] = g
        return (full,)
    return _result(np.ascontiguousarray(a.data[:, row:row + k, col:col + k]),
                   "slice_window", (a,), vjp)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - numpy-style name
    if axis is None:
        return _result(np.asarray(a.data.sum()), "sum", (a,),
                       lambda g: (np.broadcast_to(g, a.shape).copy(),))
    if axis >= a.data.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {a.shape}")
    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
    return _result(a.data.sum(axis=axis), "sum", (a,), vjp)


def spatial_mean(a: Tensor) -> Tensor:
    """Mean over the spatial dimensions of a C x H x W map, yielding (C,)."""
    if a.data.ndim != 3:
        raise ShapeError(f"spatial_mean: expected C x H x W, got shape {a.shape}")
    c, h, w = a.shape
    def vjp(g):
        return (np.broadcast_to(g[:, None, None] / (h * w), a.shape).copy(),)
    return _result(a.data.mean(axis=(1, 2)), "spatial_mean", (a,), vjp)


# ---------------------------------------------------------------------------
# normalization ops

def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)
    return _result(out, "softmax", (a,), vjp)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis vector to zero mean / unit variance, then scale and shift."""
    d = a.shape[-1] if a.data.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm: zero-length feature dimension")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} "
                         f"do not match feature dim {d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = gamma.data * xhat + beta.data
    def vjp(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    return _result(out, "layer_norm", (a, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# convolution ops (direct sliding-tap evaluation; kernels 1x1 or 3x3)

def _pad_spatial(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """2-D cross-correlation of a C_in x H x W map with C_out x C_in x k x k weights.

    Zero padding of k//2 keeps stride-1 outputs the same spatial size;
    stride 2 halves even extents exactly.
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected CxHxW input and OxCxkxk weight, "
                         f"got {x.shape} and {w.shape}")
    cin, h, wd = x.shape
    cout, wc, k, k2 = w.shape
    if wc != cin or k != k2:
        raise ShapeError(f"conv2d: weight shape {w.shape} does not match input {x.shape}")
    if k not in (1, 3):
        raise ShapeError(f"conv2d: kernel size {k} unsupported (1 or 3)")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride {stride} unsupported (1 or 2)")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {cout} channels")
    p = k // 2
    xp = _pad_spatial(x.data, p)
    hout = (h + 2 * p - k) // stride + 1
    wout = (wd + 2 * p - k) // stride + 1
    out = np.zeros((cout, hout, wout))
    for di in range(k):
        for dj in range(k):
            patch = xp[:, di:di + stride * (hout - 1) + 1:stride,
                       dj:dj + stride * (wout - 1) + 1:stride]
            out += np.tensordot(w.data[:, :, di, dj], patch, axes=([1], [0]))
    if b is not None:
        out += b.data[:, None, None]

    def vjp(g):
        gw = np.zeros_like(w.data)
        gxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                rows = slice(di, di + stride * (hout - 1) + 1, stride)
                cols = slice(dj, dj + stride * (wout - 1) + 1, stride)
                gw[:, :, di, dj] = np.tensordot(g, xp[:, rows, cols], axes=([1, 2], [1, 2]))
                gxp[:, rows, cols] += np.tensordot(w.data[:, :, di, dj], g, axes=([0], [0]))
        gx = gxp if p == 0 else gxp[:, p:p + h, p:p + wd]
        if b is None:
            return np.ascontiguousarray(gx), gw
        return np.ascontiguousarray(gx), gw, g.sum(axis=(1, 2))

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, "conv2d", parents, vjp)


def filter_grad(x: Tensor, resid: Tensor, k: int) -> Tensor:
    """Gradient-shaped correlation: d/df of sum(resid * (f cross-correlated with x)).

    For a C x H x W map ``x`` and H x W residual map ``resid`` returns the
    C x k x k array K[c,i,j] = sum_{y,x} resid[y,x] * xpad[c, y+i, x+j],
    where xpad zero-pads by k//2. Linear in both inputs.
    """
    if x.data.ndim != 3 or resid.data.ndim != 2:
        raise ShapeError(f"filter_grad: expected CxHxW and HxW, got {x.shape} and {resid.shape}")
    c, h, wd = x.shape
    if resid.shape != (h, wd):
        raise ShapeError(f"filter_grad: residual shape {resid.shape} does not match "
                         f"spatial extent {(h, wd)}")
    p = k // 2
    xp = _pad_spatial(x.data, p)
    out = np.zeros((c, k, k))
    for di in range(k):
        for dj in range(k):
            out[:, di, dj] = np.tensordot(xp[:, di:di + h, dj:dj + wd], resid.data,
                                          axes=([1, 2], [0, 1]))

    def vjp(g):
        gxp = np.zeros_like(xp)
        gr = np.zeros((h, wd))
        for di in range(k):
            for dj in range(k):
                gxp[:, di:di + h, dj:dj + wd] += g[:, di, dj, None, None] * resid.data
                gr += np.tensordot(g[:, di, dj], xp[:, di:di + h, dj:dj + wd], axes=([0], [0]))
        gx = gxp if p == 0 else gxp[:, p:p + h, p:p + wd]
        return np.ascontiguousarray(gx), gr

    return _result(out, "filter_grad", (x, resid), vjp)


# ---------------------------------------------------------------------------
# tracking-specific residual

def hinge(s: Tensor, z: np.ndarray, threshold: float) -> Tensor:
    """Classification residual: s - z where z > threshold, else max(0, s)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != s.shape:
        raise ShapeError(f"hinge: score shape {s.shape} and label shape {z.shape} differ")
    target = z > threshold
    out = np.where(target, s.data - z, np.maximum(0.0, s.data))
    mask = np.where(target, 1.0, (s.data > 0).astype(np.float64))
    return _result(out, "hinge", (s,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# generic dispatch

_OP_TABLE: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "scalar-scale": scale,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "relu": relu,
    "conv2d": conv2d,
    "spatial-mean": spatial_mean,
    "sum": sum,
    "broadcast": broadcast_to,
}


def apply(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by kind name. Raises UnknownOpError for unknown kinds."""
    try:
        fn = _OP_TABLE[kind]
    except KeyError:
        raise UnknownOpError(f"unknown op kind {kind!r}; known kinds: "
                             f"{', '.join(sorted(_OP_TABLE))}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass

def _topo_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from root, inputs before outputs, each exactly once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is detached from the tape "
                         "(no input required a gradient)")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
            continue
        parent_grads = t.node.vjp(g)
        for p, pg in builtins.zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference oracle

def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      epsilon: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between backprop gradients and central differences.

    ``f`` must rebuild its computation from the current parameter values on
    every call and return a scalar tensor. The relative error per coordinate
    is |g_a - g_n| / max(floor, |g_a| + |g_n|). The denominator floor turns
    the comparison absolute for coordinates whose gradient sits below what
    central differences can resolve: the probe difference carries rounding
    noise ~|f|*2^-52/(2*epsilon), so gradients near that scale only measure
    noise under a pure relative metric. Per-op unit checks cover those
    magnitudes. Not meaningful at non-differentiable points (e.g. relu
    kinks straddled by the probe step).
    """
    if epsilon <= 0:
        raise ValueError("finite_diff_check: epsilon must be positive")
    if floor <= 0:
        raise ValueError("finite_diff_check: floor must be positive")
    params = list(params)
    zero_grads(params)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("finite_diff_check: non-finite loss value")
    backward(loss)
    analytic = [p.grad.copy() for p in params]
    max_err = 0.0
    for p, ga in builtins.zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(f().data.reshape(()))
            flat[i] = orig - epsilon
            fm = float(f().data.reshape(()))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(
                    f"finite_diff_check: non-finite evaluation at coordinate {i}")
            gn = (fp - fm) / (2.0 * epsilon)
            err = builtins.abs(gflat[i] - gn) / builtins.max(floor, builtins.abs(gflat[i]) + builtins.abs(gn))
            if err > max_err:
                max_err = err
    return max_err
