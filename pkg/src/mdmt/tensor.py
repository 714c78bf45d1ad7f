"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is rebuilt on every forward pass: each op returns a new
:class:`Tensor` that remembers its parents and a closure mapping the output
gradient to one gradient per parent.  :meth:`Tensor.backward` orders the
graph topologically (the "tape") and walks it once in reverse.

Spatial tensors are laid out channel-first, ``(C, D, H, W)``, with an
optional leading batch axis ``(N, C, D, H, W)``.  Elementwise ops never
broadcast except against 0-d scalars.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import DimensionError, NumericError, UsageError

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "build_tape",
    "affine",
    "conv3d",
    "conv3d_reference",
    "avg_pool3d",
    "upsample_nearest3d",
    "concat_channels",
    "split_channels",
    "sigmoid",
    "silu",
    "log",
    "exp",
    "clamp",
    "grad_check",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _check_finite(data: np.ndarray, what: str = "tensor") -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values in {what}")


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array plus the bookkeeping reverse-mode AD needs.

    ``grad`` is populated on leaf tensors created with ``requires_grad=True``
    and accumulates across calls to :meth:`backward` until reset with
    :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim > 5:
            raise DimensionError(f"tensor order {arr.ndim} exceeds 5")
        _check_finite(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                backward: BackwardFn, op: str = "op") -> "Tensor":
        """Wrap the result of a custom op.

        ``backward(g)`` must return one gradient (or ``None``) per parent,
        each with that parent's shape.
        """
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        _check_finite(data, f"output of {op}")
        out.data = data
        out.grad = None
        out.op = op
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every leaf this scalar depends on."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not require grad")
        tape = build_tape(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise DimensionError(
                        f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in tape:
            if node.grad is not None and not node._parents:
                _check_finite(node.grad, "gradient")

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(as_tensor(other)))

    def __rsub__(self, other):
        return _add(as_tensor(other), _neg(self))

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(as_tensor(other), self)

    def __pow__(self, p):
        if not np.isscalar(p):
            raise UsageError("only scalar exponents are supported")
        return _pow(self, float(p))

    def sum(self, axis=None) -> "Tensor":
        return _sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in _axes(axis)]))
        return _sum(self, axis) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def flatten(self, start: int = 0) -> "Tensor":
        return _reshape(self, self.shape[:start] + (-1,))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered nodes reachable from ``root`` (inputs first)."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _axes(axis) -> tuple[int, ...]:
    return (axis,) if isinstance(axis, int) else tuple(axis)


def _unscalar(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # gradient of a 0-d operand that was broadcast against a full tensor
    if shape == g.shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def _add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (_unscalar(g, a.shape), _unscalar(g, b.shape)), "add")


def _neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def _mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    return Tensor.from_op(a.data * b.data, (a, b),
                          lambda g: (_unscalar(g * b.data, a.shape),
                                     _unscalar(g * a.data, b.shape)), "mul")


def _div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("division by zero")
    out = a.data / b.data
    return Tensor.from_op(out, (a, b),
                          lambda g: (_unscalar(g / b.data, a.shape),
                                     _unscalar(-g * out / b.data, b.shape)), "div")


def _pow(a: Tensor, p: float) -> Tensor:
    return Tensor.from_op(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def _sum(a: Tensor, axis) -> Tensor:
    out = np.sum(a.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, _axes(axis)), a.shape).copy(),)

    return Tensor.from_op(out, (a,), backward, "sum")


def _reshape(a: Tensor, shape) -> Tensor:
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


# -- elementwise nonlinearities -----------------------------------------

def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, stable for large ``|x|``; derivative ``y(1-y)``."""
    x = as_tensor(x)
    y = _stable_sigmoid(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    """``x * sigmoid(x)``: smooth everywhere, so finite differences stay clean."""
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    return Tensor.from_op(x.data * s, (x,),
                          lambda g: (g * (s + x.data * s * (1.0 - s)),), "silu")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")
    return Tensor.from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y,), "exp")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient is zero where clipping was active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor.from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


# -- layers ---------------------------------------------------------------

def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``y = W x + b`` for ``x`` of shape ``(n,)`` or a batch ``(N, n)``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine: x{x.shape}, W{W.shape}, b{b.shape} do not agree")
    out = x.data @ W.data.T + b.data

    def backward(g):
        if x.ndim == 1:
            return g @ W.data, np.outer(g, x.data), g
        return g @ W.data, g.T @ x.data, g.sum(axis=0)

    return Tensor.from_op(out, (x, W, b), backward, "affine")


def _spatial_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _batched(x: Tensor, op: str) -> bool:
    if x.ndim == 5:
        return True
    if x.ndim == 4:
        return False
    raise DimensionError(f"{op}: expected (C,D,H,W) or (N,C,D,H,W), got {x.shape}")


def conv3d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0, bias: Tensor | None = None) -> Tensor:
    """3-D cross-correlation with zero padding.

    Each spatial output extent is ``(S + 2*pad - kS) // stride + 1``.  The
    kernel has shape ``(C_out, C_in, kd, kh, kw)``; ``bias`` is optional,
    shape ``(C_out,)``.
    """
    x, k = as_tensor(x), as_tensor(k)
    batched = _batched(x, "conv3d")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv3d: stride={stride}, pad={pad}")
    xd = x.data if batched else x.data[None]
    N, C, D, H, W = xd.shape
    if k.ndim != 5 or k.shape[1] != C:
        raise DimensionError(f"conv3d: kernel {k.shape} incompatible with input channels {C}")
    Co, _, kd, kh, kw = k.shape
    out_sp = tuple(_spatial_out(s, ks, stride, pad) for s, ks in zip((D, H, W), (kd, kh, kw)))
    if min(out_sp) < 1:
        raise DimensionError(f"conv3d: kernel {k.shape[2:]} larger than padded input {(D, H, W)}+2*{pad}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (Co,):
            raise DimensionError(f"conv3d: bias shape {bias.shape} != ({Co},)")
    Do, Ho, Wo = out_sp
    V = Do * Ho * Wo
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else xd
    s = stride

    def window(a, b, c):
        return (slice(None), slice(None),
                slice(a, a + s * (Do - 1) + 1, s),
                slice(b, b + s * (Ho - 1) + 1, s),
                slice(c, c + s * (Wo - 1) + 1, s))

    offsets = [(a, b, c) for a in range(kd) for b in range(kh) for c in range(kw)]
    K = len(offsets)
    # im2col: cols[n, ci, t, v] = xp[n, ci, window t][v], one t per kernel tap
    cols = np.empty((N, C, K, Do, Ho, Wo))
    for t, (a, b, c) in enumerate(offsets):
        cols[:, :, t] = xp[window(a, b, c)]
    cols = cols.reshape(N, C * K, V)
    k2 = k.data.reshape(Co, C * K)
    out = k2 @ cols
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(N, Co, Do, Ho, Wo)

    def backward(g):
        gv = (g if batched else g[None]).reshape(N, Co, V)
        grads = [None, None]
        if k.requires_grad:
            gk = gv[0] @ cols[0].T
            for n in range(1, N):
                gk += gv[n] @ cols[n].T
            grads[1] = gk.reshape(k.shape)
        if x.requires_grad:
            gcols = (k2.T @ gv).reshape(N, C, K, Do, Ho, Wo)
            gxp = np.zeros_like(xp)
            for t, (a, b, c) in enumerate(offsets):
                gxp[window(a, b, c)] += gcols[:, :, t]
            gx = gxp[:, :, pad:pad + D, pad:pad + H, pad:pad + W]
            grads[0] = gx if batched else gx[0]
        if bias is not None:
            grads.append(gv.sum(axis=(0, 2)))
        return grads

    parents = (x, k) if bias is None else (x, k, bias)
    return Tensor.from_op(out if batched else out[0], parents, backward, "conv3d")


def conv3d_reference(x, k, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct nested-loop cross-correlation on a single ``(C,D,H,W)`` input.

    Slow; kept as the oracle the vectorised :func:`conv3d` is tested against.
    """
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    C, D, H, W = x.shape
    Co, Ci, kd, kh, kw = k.shape
    if Ci != C:
        raise DimensionError("conv3d_reference: channel mismatch")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    Do, Ho, Wo = (_spatial_out(D, kd, stride, pad), _spatial_out(H, kh, stride, pad),
                  _spatial_out(W, kw, stride, pad))
    out = np.zeros((Co, Do, Ho, Wo))
    for o in range(Co):
        for z in range(Do):
            for y in range(Ho):
                for q in range(Wo):
                    acc = 0.0
                    for a in range(kd):
                        for b in range(kh):
                            for c in range(kw):
                                for ci in range(C):
                                    acc += (xp[ci, z * stride + a, y * stride + b, q * stride + c]
                                            * k[o, ci, a, b, c])
                    out[o, z, y, q] = acc
    return out


def avg_pool3d(x: Tensor, factor: int) -> Tensor:
    """Mean over non-overlapping ``factor**3`` blocks."""
    x = as_tensor(x)
    _batched(x, "avg_pool3d")
    if factor < 1:
        raise DimensionError(f"avg_pool3d: factor {factor} < 1")
    sp = x.shape[-3:]
    if any(s % factor for s in sp):
        raise DimensionError(f"avg_pool3d: spatial shape {sp} not divisible by {factor}")
    lead = x.shape[:-3]
    D, H, W = (s // factor for s in sp)
    f = factor
    blocks = x.data.reshape(lead + (D, f, H, f, W, f))
    ax = tuple(len(lead) + i for i in (1, 3, 5))
    out = blocks.mean(axis=ax)

    def backward(g):
        ge = np.expand_dims(g, ax) / f ** 3
        return (np.broadcast_to(ge, blocks.shape).reshape(x.shape).copy(),)

    return Tensor.from_op(out, (x,), backward, "avg_pool3d")


def upsample_nearest3d(x: Tensor, factor: int) -> Tensor:
    """Replicate each voxel into a ``factor**3`` block."""
    x = as_tensor(x)
    _batched(x, "upsample_nearest3d")
    if factor < 1:
        raise DimensionError(f"upsample_nearest3d: factor {factor} < 1")
    f = factor
    lead = x.shape[:-3]
    D, H, W = x.shape[-3:]
    ax = tuple(len(lead) + i for i in (1, 3, 5))
    expanded = np.broadcast_to(np.expand_dims(x.data, ax), lead + (D, f, H, f, W, f))
    out = expanded.reshape(lead + (D * f, H * f, W * f))

    def backward(g):
        return (g.reshape(lead + (D, f, H, f, W, f)).sum(axis=ax),)

    return Tensor.from_op(out, (x,), backward, "upsample_nearest3d")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Stack along the channel axis, preserving order."""
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise DimensionError("concat_channels: empty input")
    batched = _batched(xs[0], "concat_channels")
    axis = 1 if batched else 0
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or t.shape[:axis] + t.shape[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise DimensionError(f"concat_channels: {t.shape} incompatible with {ref}")
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return Tensor.from_op(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def split_channels(x: Tensor, sizes: Iterable[int]) -> list[Tensor]:
    """Inverse of :func:`concat_channels`."""
    x = as_tensor(x)
    axis = 1 if _batched(x, "split_channels") else 0
    sizes = list(sizes)
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split_channels: sizes {sizes} do not sum to {x.shape[axis]}")
    outs = []
    start = 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + n)
        sl = tuple(sl)

        def backward(g, sl=sl):
            full = np.zeros_like(x.data)
            full[sl] = g
            return (full,)

        outs.append(Tensor.from_op(x.data[sl], (x,), backward, "split"))
        start += n
    return outs


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
               indices: Sequence[int] | None = None) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)``.

    ``indices`` restricts the check to those flat coordinates of ``x``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise UsageError(f"eps={eps} outside [1e-7, 1e-3]")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    _check_finite(x0, "grad_check input")
    xt = Tensor(x0, requires_grad=True)
    y = f(xt)
    if y.size != 1:
        raise UsageError("grad_check: f must be scalar-valued")
    y.backward()
    analytic = xt.grad.reshape(-1)
    flat = x0.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(x0)).item()
            flat[i] = orig - eps
            fm = f(Tensor(x0)).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            if not np.isfinite(num):
                raise NumericError("grad_check: non-finite finite difference")
            worst = max(worst, abs(analytic[i] - num) / max(1.0, abs(analytic[i])))
    return worst
