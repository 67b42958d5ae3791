"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable primitive records a node on the active :class:`Tape`.
:func:`backward` replays the adjoints of that tape in reverse recording order.
Broadcasting is restricted to two patterns: a size-1 operand combined with any
tensor, and rank-matched singleton expansion (per-channel / per-sample bias).
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A non-finite value reached an operation that requires finite input."""


class TapeError(RuntimeError):
    """Misuse of the computation tape (double replay, untracked root, ...)."""


_DEFAULT_DTYPE = np.float64
_local = threading.local()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class _Node:
    __slots__ = ("out", "inputs", "adjoint")

    def __init__(self, out, inputs, adjoint):
        self.out = out
        self.inputs = inputs
        self.adjoint = adjoint


class Tape:
    """Ordered record of primitive operations.

    A tape may be replayed once; :meth:`reset` clears it for reuse. With
    ``retain_grads=False`` only leaf tensors receive ``.grad``, which keeps peak
    memory down during training.
    """

    def __init__(self, retain_grads: bool = True):
        self._nodes: list[_Node] = []
        self.consumed = False
        self.retain_grads = retain_grads

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, out: "Tensor", inputs: tuple, adjoint: Callable) -> None:
        if self.consumed:
            raise TapeError("tape was already replayed; call reset() before recording")
        self._nodes.append(_Node(out, inputs, adjoint))

    def reset(self) -> None:
        self._nodes.clear()
        self.consumed = False

    def backward(self, root: "Tensor") -> None:
        if self.consumed:
            raise TapeError("adjoints already replayed on this tape; reset() first")
        if root._tape is not self:
            raise TapeError("root was not recorded on this tape")
        grads = {id(root): np.ones_like(root.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if self.retain_grads or node.out is root:
                _accumulate(node.out, g)
            for inp, gi in zip(node.inputs, node.adjoint(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                else:
                    _accumulate(inp, gi)
        self.consumed = True
        self._nodes.clear()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def current_tape() -> Tape:
    st = _stack()
    if st:
        return st[-1]
    tape = getattr(_local, "default", None)
    if tape is None or tape.consumed:
        tape = _local.default = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def _accumulate(t: "Tensor", g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = g.reshape(t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                arr = data
            else:
                arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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
            raise TypeError("division is only defined by a python scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def _make(data: np.ndarray, inputs: tuple, adjoint: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        tape = current_tape()
        out.requires_grad = True
        out._tape = tape
        tape.record(out, inputs, adjoint)
    return out


def _scalar_operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


# ---------------------------------------------------------------- broadcasting

def broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    """Result shape under the restricted broadcasting rules."""
    if sa == sb:
        return sa
    na, nb = int(np.prod(sa)), int(np.prod(sb))
    if nb == 1 and len(sb) <= max(len(sa), 1):
        return sa
    if na == 1 and len(sa) <= max(len(sb), 1):
        return sb
    if len(sa) == len(sb):
        if all(b in (1, a) for a, b in zip(sa, sb)):
            return sa
        if all(a in (1, b) for a, b in zip(sa, sb)):
            return sb
    raise DimensionError(f"shapes {sa} and {sb} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _scalar_operand(a, b)
    b = _scalar_operand(b, a)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _scalar_operand(a, b)
    b = _scalar_operand(b, a)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        if not isinstance(b, Tensor):
            raise TypeError("mul needs at least one Tensor")
        return scale(b, a) if np.isscalar(a) else mul(_scalar_operand(a, b), b)
    if np.isscalar(b):
        return scale(a, b)
    b = _scalar_operand(b, a)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    # subgradient 0 at 0
    return _make(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = sigmoid_np(xd)
    return _make(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports ``(m,k)@(k,p)``, batched ``(B,m,k)@(B,k,p)`` and a shared right
    operand ``(...,m,k)@(k,p)``.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    if bd.ndim == 2:
        out = ad @ bd

        def adjoint(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _make(out, (a, b), adjoint)
    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul batch shapes {a.shape} and {b.shape} do not agree")
    out = ad @ bd

    def adjoint_batched(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), adjoint_batched)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by row-max subtraction."""
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NumericError("softmax_rows received non-finite input")
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), adjoint)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    src = x.shape
    return _make(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        if x.ndim != 2:
            raise DimensionError(f"default transpose needs a matrix, got {x.shape}")
        axes = (1, 0)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def tensor_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _make(out, (x,), adjoint)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tensor_sum(x, axis, keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != axis):
            raise DimensionError(f"cannot concatenate {ref} with {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """``out[n, c*r*r + i*r + j, y, x] = in[n, c, y*r + i, x*r + j]``."""
    N, C, H, W = x.shape
    if H % r or W % r:
        raise DimensionError(f"spatial extent {H}x{W} not divisible by unshuffle factor {r}")
    out = x.data.reshape(N, C, H // r, r, W // r, r).transpose(0, 1, 3, 5, 2, 4)
    out = out.reshape(N, C * r * r, H // r, W // r)
    return _make(out, (x,), lambda g: (_shuffle_np(g, r),))


def _shuffle_np(y: np.ndarray, r: int) -> np.ndarray:
    N, Cr, h, w = y.shape
    C = Cr // (r * r)
    return y.reshape(N, C, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(N, C, h * r, w * r)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    N, Cr, h, w = x.shape
    if Cr % (r * r):
        raise DimensionError(f"{Cr} channels not divisible by {r}x{r}")

    def adjoint(g):
        C = Cr // (r * r)
        return (g.reshape(N, C, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(N, Cr, h, w),)

    return _make(_shuffle_np(x.data, r), (x,), adjoint)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return _make(out, (x,),
                 lambda g: (g.reshape(N, C, H, factor, W, factor).sum(axis=(3, 5)),))


# ---------------------------------------------------------------- convolution

_CONV_BACKEND = os.environ.get("NEXUS_CONV_BACKEND", "numpy")


def set_conv_backend(name: str) -> None:
    """Select the convolution kernel: ``numpy`` (reference) or ``torch`` (accelerated)."""
    global _CONV_BACKEND
    if name not in ("numpy", "torch"):
        raise ValueError(f"unknown conv backend {name!r}")
    if name == "torch":
        _torch()
    _CONV_BACKEND = name


def get_conv_backend() -> str:
    return _CONV_BACKEND


_TORCH = None


def _torch():
    global _TORCH
    if _TORCH is None:
        import torch

        torch.set_num_threads(1)
        _TORCH = torch
    return _TORCH


def _conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _conv_np(x, w, stride, padding, groups):
    N, C, H, W = x.shape
    O, Cg, k, _ = w.shape
    G = groups
    if k == 1 and stride == 1 and padding == 0 and G == 1:
        cols = x.transpose(1, 0, 2, 3).reshape(C, -1)[None]
        out = (w.reshape(1, O, C) @ cols).reshape(O, N, H, W).transpose(1, 0, 2, 3)
        return out, cols
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    Ho = _conv_out_extent(H, k, stride, padding)
    Wo = _conv_out_extent(W, k, stride, padding)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.reshape(N, G, Cg, Ho, Wo, k, k).transpose(1, 2, 5, 6, 0, 3, 4)
    cols = cols.reshape(G, Cg * k * k, N * Ho * Wo)
    out = w.reshape(G, O // G, Cg * k * k) @ cols
    out = out.reshape(O, N, Ho, Wo).transpose(1, 0, 2, 3)
    return out, cols


def _conv_np_backward(g, x_shape, w, cols, stride, padding, groups, need_x, need_w):
    N, C, H, W = x_shape
    O, Cg, k, _ = w.shape
    G = groups
    Ho, Wo = g.shape[2], g.shape[3]
    gm = g.transpose(1, 0, 2, 3).reshape(G, O // G, N * Ho * Wo)
    gw = None
    if need_w:
        gw = (gm @ cols.transpose(0, 2, 1)).reshape(w.shape)
    gx = None
    if need_x:
        wm = w.reshape(G, O // G, Cg * k * k)
        dcols = wm.transpose(0, 2, 1) @ gm
        if k == 1 and stride == 1 and padding == 0 and G == 1:
            gx = dcols.reshape(C, N, H, W).transpose(1, 0, 2, 3)
        else:
            dcols = dcols.reshape(C, k, k, N, Ho, Wo)
            Hp, Wp = H + 2 * padding, W + 2 * padding
            gxp = np.zeros((N, C, Hp, Wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += \
                        dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + H, padding:padding + W]
    return gx, gw


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``w[O,C/groups,k,k]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    O, Cg, k, k2 = w.shape
    if k != k2:
        raise DimensionError(f"non-square kernel {w.shape}")
    if C % groups or O % groups or Cg != C // groups:
        raise DimensionError(
            f"input channels {C} incompatible with weight {w.shape} and groups={groups}")
    if stride > 1 and (H % stride or W % stride):
        raise DimensionError(f"spatial extent {H}x{W} not divisible by stride {stride}")
    if H + 2 * padding < k or W + 2 * padding < k:
        raise DimensionError(f"input {H}x{W} smaller than kernel {k}")
    inputs = (x, w) if b is None else (x, w, b)
    if _CONV_BACKEND == "torch":
        return _conv_torch(x, w, b, stride, padding, groups, inputs)
    out, cols = _conv_np(x.data, w.data, stride, padding, groups)
    if b is not None:
        out = out + b.data.reshape(1, O, 1, 1)
    xs, wd = x.shape, w.data

    def adjoint(g):
        gx, gw = _conv_np_backward(g, xs, wd, cols, stride, padding, groups,
                                   x.requires_grad, w.requires_grad)
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if b.requires_grad else None)

    return _make(np.ascontiguousarray(out), inputs, adjoint)


def _conv_torch(x, w, b, stride, padding, groups, inputs):
    torch = _torch()
    xt = torch.from_numpy(np.ascontiguousarray(x.data))
    wt = torch.from_numpy(np.ascontiguousarray(w.data))
    bt = None if b is None else torch.from_numpy(np.ascontiguousarray(b.data))
    with torch.no_grad():
        out = torch.nn.functional.conv2d(xt, wt, bt, stride, padding, 1, groups).numpy()

    def adjoint(g):
        mask = [x.requires_grad, w.requires_grad, b is not None and b.requires_grad]
        gx, gw, gb = torch.ops.aten.convolution_backward(
            torch.from_numpy(np.ascontiguousarray(g)), xt, wt,
            None if b is None else [w.shape[0]], [stride, stride], [padding, padding],
            [1, 1], False, [0, 0], groups, mask)
        res = [None if gx is None else gx.numpy(), None if gw is None else gw.numpy()]
        if b is not None:
            res.append(None if gb is None else gb.numpy())
        return tuple(res)

    return _make(out, inputs, adjoint)


# ---------------------------------------------------------------- normalization

def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Group-wise standardisation over ``(C/groups, *spatial)`` followed by a per-channel affine."""
    N, C = x.shape[:2]
    if C % groups:
        raise DimensionError(f"{C} channels not divisible into {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"affine parameters {gamma.shape}/{beta.shape} do not match {C} channels")
    xg = x.data.reshape(N, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv
    cshape = (1, C) + (1,) * (x.ndim - 2)
    gam = gamma.data.reshape(cshape)
    y = xhat.reshape(x.shape) * gam + beta.data.reshape(cshape)
    red = (0,) + tuple(range(2, x.ndim))

    def adjoint(g):
        gx = ggam = gbeta = None
        if gamma.requires_grad:
            ggam = (g * xhat.reshape(g.shape)).sum(axis=red)
        if beta.requires_grad:
            gbeta = g.sum(axis=red)
        if x.requires_grad:
            d = (g * gam).reshape(N, groups, -1)
            gx = inv * (d - d.mean(axis=-1, keepdims=True)
                        - xhat * (d * xhat).mean(axis=-1, keepdims=True))
            gx = gx.reshape(g.shape)
        return gx, ggam, gbeta

    return _make(y, (x, gamma, beta), adjoint)


# ---------------------------------------------------------------- differentiation

def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every differentiable ancestor of the scalar ``root``."""
    if root.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root._tape is None:
        raise TapeError("root was not produced by recorded operations")
    root._tape.backward(root)


# ---------------------------------------------------------------- NXTN records

NXTN_MAGIC = b"NXTN"
_DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}


def tensor_to_bytes(arr) -> bytes:
    """Encode an array as an NXTN record (little-endian, row-major)."""
    if isinstance(arr, Tensor):
        arr = arr.data
    arr = np.asarray(arr)
    if arr.dtype == np.float64:
        code = 1
    elif arr.dtype == np.float32:
        code = 2
    else:
        raise ValueError(f"NXTN supports f64/f32 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank too large")
    head = NXTN_MAGIC + bytes([1, arr.ndim, code, 0])
    head += np.asarray(arr.shape, dtype="<u8").tobytes()
    return head + np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()


def tensor_from_bytes(buf, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one NXTN record at ``offset``; returns the array and the end offset."""
    mv = memoryview(buf)
    if bytes(mv[offset:offset + 4]) != NXTN_MAGIC:
        raise ValueError(f"bad NXTN magic at offset {offset}")
    version, rank, code, _pad = mv[offset + 4:offset + 8]
    if version != 1:
        raise ValueError(f"unsupported NXTN version {version}")
    if code not in _DTYPE_CODES:
        raise ValueError(f"unknown NXTN dtype code {code}")
    pos = offset + 8
    shape = tuple(int(s) for s in np.frombuffer(mv[pos:pos + 8 * rank], dtype="<u8"))
    pos += 8 * rank
    dt = _DTYPE_CODES[code]
    n = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(mv[pos:pos + n * dt.itemsize], dtype=dt).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + n * dt.itemsize
