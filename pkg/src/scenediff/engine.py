"""Minimal dense-tensor compute layer with reverse-mode gradients.

Tensors wrap row-major numpy arrays (float64 for training and gradient
tests, float32 permitted for inference). Every differentiable primitive
records its inputs and a backward closure on the output node; ``backward``
replays those records in reverse topological order and accumulates one
gradient per leaf parameter. ``grad_check`` validates any scalar function
of the parameters against central finite differences.

Broadcasting is deliberately restricted: elementwise binary ops require
identical shapes (or a python scalar), and any other expansion must go
through an explicit ``broadcast_to``. Shape bugs surface early this way.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .kernels import scan_backward, scan_forward


class ShapeError(ValueError):
    """Operands with incompatible shapes; message names both shapes."""


class NumericsError(ArithmeticError):
    """Non-finite value reached a checkpoint where finiteness is required."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus the tape record that produced it.

    ``v`` is the forward value (numpy, C-contiguous). Leaves created with
    ``requires_grad=True`` are the trainable parameters; interior nodes
    keep references to their parents and a backward closure.
    """

    __slots__ = ("v", "requires_grad", "name", "_parents", "_bw")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.v = np.ascontiguousarray(value)
        if self.v.dtype not in (np.float64, np.float32):
            self.v = self.v.astype(np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._bw: Callable[[np.ndarray, dict], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.v.shape

    @property
    def ndim(self) -> int:
        return self.v.ndim

    @property
    def size(self) -> int:
        return self.v.size

    @property
    def dtype(self):
        return self.v.dtype

    def item(self) -> float:
        if self.v.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.v.reshape(-1)[0])

    def check_finite(self, context: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.v)):
            raise NumericsError(f"non-finite values in {context}")
        return self

    def __repr__(self):
        tag = self.name or ("param" if self.requires_grad else "tensor")
        return f"Tensor({tag}, shape={self.shape}, dtype={self.v.dtype})"

    # Operator sugar; all routed through the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def tensor(value, dtype=np.float64) -> Tensor:
    """Wrap a constant (no gradient) value."""
    return Tensor(np.asarray(value, dtype=dtype))


def parameter(value, name: str, dtype=np.float64) -> Tensor:
    """Wrap a trainable leaf."""
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=True, name=name)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=like.v.dtype))
    return Tensor(np.asarray(x, dtype=like.v.dtype))


def _tracked(*parents: Tensor) -> bool:
    return _grad_enabled and any(p.requires_grad or p._bw is not None for p in parents)


def _make(value: np.ndarray, parents: tuple[Tensor, ...], bw) -> Tensor:
    out = Tensor(value)
    if _tracked(*parents):
        out.requires_grad = True
        out._parents = parents
        out._bw = bw
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _same_shape(a, b, "add")

    def bw(g, acc):
        _accum(acc, a, _unbroadcast(g, a.shape))
        _accum(acc, b, _unbroadcast(g, b.shape))

    return _make(a.v + b.v, (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _same_shape(a, b, "sub")

    def bw(g, acc):
        _accum(acc, a, _unbroadcast(g, a.shape))
        _accum(acc, b, _unbroadcast(-g, b.shape))

    return _make(a.v - b.v, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _same_shape(a, b, "mul")
    av, bv = a.v, b.v

    def bw(g, acc):
        _accum(acc, a, _unbroadcast(g * bv, a.shape))
        _accum(acc, b, _unbroadcast(g * av, b.shape))

    return _make(av * bv, (a, b), bw)


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _same_shape(a, b, "div")
    av, bv = a.v, b.v

    def bw(g, acc):
        _accum(acc, a, _unbroadcast(g / bv, a.shape))
        _accum(acc, b, _unbroadcast(-g * av / (bv * bv), b.shape))

    return _make(av / bv, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g, acc):
        _accum(acc, a, -g)

    return _make(-a.v, (a,), bw)


def log(a: Tensor) -> Tensor:
    av = a.v

    def bw(g, acc):
        _accum(acc, a, g / av)

    return _make(np.log(av), (a,), bw)


def exp(a: Tensor) -> Tensor:
    out_v = np.exp(a.v)

    def bw(g, acc):
        _accum(acc, a, g * out_v)

    return _make(out_v, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out_v = np.sqrt(a.v)

    def bw(g, acc):
        _accum(acc, a, g * 0.5 / out_v)

    return _make(out_v, (a,), bw)


def maximum_const(a: Tensor, floor: float) -> Tensor:
    """Elementwise max with a constant; gradient is blocked where clamped."""
    mask = a.v > floor

    def bw(g, acc):
        _accum(acc, a, g * mask)

    return _make(np.maximum(a.v, floor), (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.v > 0

    def bw(g, acc):
        _accum(acc, a, g * mask)

    return _make(a.v * mask, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.v))

    def bw(g, acc):
        _accum(acc, a, g * s * (1.0 - s))

    return _make(s, (a,), bw)


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.v))
    av = a.v

    def bw(g, acc):
        _accum(acc, a, g * (s + av * s * (1.0 - s)))

    return _make(av * s, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.v)

    def bw(g, acc):
        _accum(acc, a, g * (1.0 - t * t))

    return _make(t, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra / shape primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported operand forms: ``[..., m, k] @ [k, n]`` (shared weight) and
    ``[..., m, k] @ [..., k, n]`` with identical leading dims.
    """
    av, bv = a.v, b.v
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {av.shape} and {bv.shape} differ")
    if bv.ndim != 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: leading dims of {av.shape} and {bv.shape} differ")

    def bw(g, acc):
        if a.requires_grad or a._bw is not None:
            _accum(acc, a, g @ np.swapaxes(bv, -1, -2))
        if b.requires_grad or b._bw is not None:
            if bv.ndim == 2:
                k, n = bv.shape
                _accum(acc, b, av.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accum(acc, b, np.swapaxes(av, -1, -2) @ g)

    return _make(av @ bv, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g, acc):
        _accum(acc, a, np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(a.v.transpose(axes)), (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def bw(g, acc):
        _accum(acc, a, g.reshape(old))

    return _make(a.v.reshape(shape), (a,), bw)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def bw(g, acc):
        _accum(acc, a, _unbroadcast(g, old))

    return _make(np.ascontiguousarray(np.broadcast_to(a.v, shape)), (a,), bw)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g, acc):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(acc, p, np.ascontiguousarray(g[tuple(idx)]))

    return _make(np.concatenate([p.v for p in parts], axis=axis), tuple(parts), bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g, acc):
        full = np.zeros_like(a.v)
        full[idx] = g
        _accum(acc, a, full)

    return _make(np.ascontiguousarray(a.v[idx]), (a,), bw)


def flip(a: Tensor, axis: int) -> Tensor:
    def bw(g, acc):
        _accum(acc, a, np.ascontiguousarray(np.flip(g, axis)))

    return _make(np.ascontiguousarray(np.flip(a.v, axis)), (a,), bw)


def gather(a: Tensor, index, axis: int = 0) -> Tensor:
    """Take rows of ``a`` along ``axis`` (integer index array)."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= a.shape[axis]):
        raise ShapeError(
            f"gather: index out of range for axis {axis} of shape {a.shape}"
        )

    def bw(g, acc):
        full = np.zeros_like(a.v)
        if axis == 0:
            np.add.at(full, index, g)
        else:
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, index, np.moveaxis(g, axis, 0))
        _accum(acc, a, full)

    return _make(np.ascontiguousarray(np.take(a.v, index, axis=axis)), (a,), bw)


# ---------------------------------------------------------------------------
# reductions and normalizations
# ---------------------------------------------------------------------------

def mean(a: Tensor) -> Tensor:
    n = a.size

    def bw(g, acc):
        _accum(acc, a, np.full(a.shape, float(g) / n, dtype=a.v.dtype))

    return _make(np.asarray(a.v.mean(), dtype=a.v.dtype), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g, acc):
        _accum(acc, a, np.full(a.shape, float(g), dtype=a.v.dtype))

    return _make(np.asarray(a.v.sum(), dtype=a.v.dtype), (a,), bw)


def sum_axis(a: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    def bw(g, acc):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(acc, a, np.ascontiguousarray(np.broadcast_to(g, a.shape)))

    return _make(a.v.sum(axis=axis, keepdims=keepdims), (a,), bw)


def sum_squared(a: Tensor) -> Tensor:
    av = a.v

    def bw(g, acc):
        _accum(acc, a, 2.0 * float(g) * av)

    return _make(np.asarray((av * av).sum(), dtype=av.dtype), (a,), bw)


def softmax(a: Tensor, axis: int) -> Tensor:
    shifted = a.v - a.v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_v = e / e.sum(axis=axis, keepdims=True)

    def bw(g, acc):
        dot = (g * out_v).sum(axis=axis, keepdims=True)
        _accum(acc, a, (g - dot) * out_v)

    return _make(out_v, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} must be ({d},)"
        )
    mu = a.v.mean(axis=-1, keepdims=True)
    xc = a.v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.v

    def bw(g, acc):
        gx = g * gv
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        _accum(acc, a, (gx - m1 - xhat * m2) * inv)
        red = tuple(range(g.ndim - 1))
        _accum(acc, gain, (g * xhat).sum(axis=red))
        _accum(acc, bias, g.sum(axis=red))

    return _make(xhat * gv + bias.v, (a, gain, bias), bw)


# ---------------------------------------------------------------------------
# recurrent scan (kernel-backed)
# ---------------------------------------------------------------------------

def gru_scan(xg: Tensor, h0: Tensor, u: Tensor) -> Tensor:
    """Gated recurrent scan over the leading (time) axis.

    ``xg`` carries the precomputed input-side pre-activations ``[T, B, 3H]``
    (update/reset/candidate thirds), ``h0`` the initial state ``[B, H]`` and
    ``u`` the recurrent weights ``[H, 3H]``. Per step:

        z = sigmoid(xg_z + h u_z); r = sigmoid(xg_r + h u_r)
        n = tanh(xg_n + r * (h u_n));  h' = (1 - z) * h + z * n

    Dispatches to the compiled kernel when available (float64), else the
    numpy fallback; both produce the same sequence of hidden states.
    """
    T, B, H3 = xg.shape
    H = H3 // 3
    if h0.shape != (B, H) or u.shape != (H, 3 * H):
        raise ShapeError(
            f"gru_scan: xg {xg.shape} needs h0 ({B},{H}) and u ({H},{3*H}), "
            f"got {h0.shape} and {u.shape}"
        )
    hs, cache = scan_forward(xg.v, h0.v, u.v)

    def bw(g, acc):
        dxg, dh0, du = scan_backward(np.ascontiguousarray(g), cache, u.v)
        _accum(acc, xg, dxg)
        _accum(acc, h0, dh0)
        _accum(acc, u, du)

    return _make(hs, (xg, h0, u), bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _accum(acc: dict, t: Tensor, grad: np.ndarray):
    if not (t.requires_grad or t._bw is not None):
        return
    key = id(t)
    if key in acc:
        acc[key] = acc[key] + grad
    else:
        acc[key] = grad


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
            if id(p) not in seen and (p.requires_grad or p._bw is not None):
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Reverse-accumulate gradients of a scalar loss.

    Returns a map ``id(tensor) -> gradient array`` covering every tracked
    leaf reached from ``loss``. When ``params`` is given, every listed
    parameter is guaranteed a (possibly zero) entry.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.v)}
    for node in reversed(_topo_order(loss)):
        g = acc.get(id(node))
        if g is None or node._bw is None:
            continue
        node._bw(g, acc)
    grads: dict[int, np.ndarray] = {}
    if params is not None:
        for p in params:
            grads[id(p)] = acc.get(id(p), np.zeros_like(p.v))
    else:
        grads = acc
    return grads


def grad_of(grads: dict[int, np.ndarray], p: Tensor) -> np.ndarray:
    return grads[id(p)]


# ---------------------------------------------------------------------------
# finite-difference validation
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int = 8,
    rng: np.random.Generator | None = None,
    abs_floor: float = 1e-6,
) -> dict[str, float]:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    For each parameter, up to ``max_coords`` coordinates are perturbed by
    ``+-step`` (all coordinates when the tensor is small). The report maps
    parameter name to its max relative error, with relative error defined
    as ``|a - b| / max(|a|, |b|, abs_floor)`` so near-zero gradients are
    compared absolutely. Parameters must be float64 for the comparison to
    be meaningful.
    """
    if not params:
        return {}
    rng = rng or np.random.default_rng(0)
    loss = f()
    grads = backward(loss, params)
    report: dict[str, float] = {}
    for i, p in enumerate(params):
        g = grads[id(p)]
        flat = p.v.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            hi = f().item()
            flat[c] = orig - step
            lo = f().item()
            flat[c] = orig
            fd = (hi - lo) / (2.0 * step)
            rv = float(g.reshape(-1)[c])
            err = abs(rv - fd) / max(abs(rv), abs(fd), abs_floor)
            worst = max(worst, err)
        report[p.name or f"param{i}"] = worst
    return report
