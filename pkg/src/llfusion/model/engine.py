"""Reverse-mode autodiff on numpy arrays.

Small define-by-run graph engine sized for this project: float64 everywhere
(the 1e-4 finite-difference tolerance is meaningless in single precision),
fused ops for the expensive pieces (linear maps over the channel axis,
depthwise convolution, layer norm, softmax) so graphs stay a few hundred
nodes deep. Gradients accumulate out-of-place; intermediate grads are freed
during the backward sweep to bound peak memory.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError


class Tensor:
    """One node of the computation graph. Holds a float64 array and, after
    backward(), the gradient of the final scalar w.r.t. it."""

    __slots__ = ("data", "grad", "_backward", "_prev")

    def __init__(self, data, _prev=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._backward = None
        self._prev = _prev

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # operator sugar used by the network code
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


class Parameter(Tensor):
    """Leaf tensor owned by a ParameterStore; its gradient survives backward()."""


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # out-of-place so a grad that aliases another node's buffer is never mutated
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(root: Tensor) -> None:
    """Reverse sweep from a scalar (or any) root. Intermediate gradients are
    released as soon as their node has been processed; Parameter grads are kept.
    One sweep per graph — graphs are rebuilt every forward pass."""
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in visited:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node is not root:
                node.grad = None  # intermediates: consumed, release the memory


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, (a, b))

    def _bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out._backward = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, (a, b))

    def _bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, (a, b))

    def _bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = _bw
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s, (a,))

    def _bw(g):
        _accum(a, g * s)

    out._backward = _bw
    return out


def add_const(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + c, (a,))

    def _bw(g):
        _accum(a, g)

    out._backward = _bw
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), (a,))

    def _bw(g):
        _accum(a, g.reshape(a.data.shape))

    out._backward = _bw
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes), (a,))
    inv = tuple(np.argsort(axes))

    def _bw(g):
        _accum(a, g.transpose(inv))

    out._backward = _bw
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    out._backward = _bw
    return out


def channel_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the last axis."""
    out = Tensor(a.data[..., start:stop], (a,))

    def _bw(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        _accum(a, full)

    out._backward = _bw
    return out


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def t_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims), (a,))

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.data.shape))

    out._backward = _bw
    return out


def t_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    n = int(np.prod([a.data.shape[ax] for ax in axes]))
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims), (a,))

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g / n, a.data.shape))

    out._backward = _bw
    return out


def t_abs(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data), (a,))

    def _bw(g):
        _accum(a, g * np.sign(a.data))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def _sigmoid_arr(x: np.ndarray) -> np.ndarray:
    # branchless stable form: exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_arr(a.data)
    out = Tensor(y, (a,))

    def _bw(g):
        _accum(a, g * y * (1.0 - y))

    out._backward = _bw
    return out


def softplus(a: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(0.0, a.data), (a,))

    def _bw(g):
        _accum(a, g * _sigmoid_arr(a.data))

    out._backward = _bw
    return out


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU; smooth, so finite-difference checks stay clean.

    Integer powers are spelled as products: np.power falls into libm's
    correctly-rounded slow path on a fraction of real activation values,
    costing ~100x on large arrays.
    """
    x = a.data
    th = x * x
    th *= 0.044715 * x
    th += x
    th *= _GELU_K
    np.tanh(th, out=th)
    y = th + 1.0
    y *= 0.5 * x
    out = Tensor(y, (a,))

    def _bw(g):
        du = x * x
        du *= 3 * 0.044715
        du += 1.0
        du *= _GELU_K
        du *= 1.0 - th * th
        du *= 0.5 * x
        du += 0.5 * (1.0 + th)
        du *= g
        _accum(a, du)

    out._backward = _bw
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, with per-row max subtraction so logits of
    magnitude 1e4 still produce finite rows."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, (a,))

    def _bw(g):
        _accum(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# fused network ops
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Point-wise linear map over the last axis: y[..., o] = x[..., i] w[o, i] + b[o].

    This is the engine's 1x1 convolution; leading axes (batch, height, width)
    are flattened into the matmul.
    """
    if x.data.shape[-1] != w.data.shape[1]:
        raise ShapeError(
            f"linear: input has {x.data.shape[-1]} channels, weight expects {w.data.shape[1]}"
        )
    lead = x.data.shape[:-1]
    x2 = np.ascontiguousarray(x.data).reshape(-1, x.data.shape[-1])
    y = x2 @ w.data.T  # one dgemm instead of a stack of tiny batched ones
    if b is not None:
        y = y + b.data
    out = Tensor(y.reshape(lead + (w.data.shape[0],)), (x, w, b) if b is not None else (x, w))

    def _bw(g):
        g2 = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
        _accum(x, (g2 @ w.data).reshape(x.data.shape))
        _accum(w, g2.T @ x2)
        if b is not None:
            _accum(b, g2.sum(axis=0))

    out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product (..., n, k) @ (..., k, m); leading dims must
    broadcast the numpy way."""
    out = Tensor(np.matmul(a.data, b.data), (a, b))

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    out._backward = _bw
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last (channel) axis per position, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    d = x.data - mu
    var = (d * d).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = d * inv
    out = Tensor(xhat * gamma.data + beta.data, (x, gamma, beta))

    def _bw(g):
        n = x.data.shape[-1]
        gxh = g * gamma.data
        _accum(
            x,
            inv
            * (
                gxh
                - gxh.mean(axis=-1, keepdims=True)
                - xhat * (gxh * xhat).mean(axis=-1, keepdims=True)
            ),
        )
        red = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=red))
        _accum(beta, g.sum(axis=red))

    out._backward = _bw
    return out


def depthwise_conv(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Depthwise k x k convolution over (B, H, W, C), SAME zero padding.

    w has shape (k, k, C); each channel is filtered independently.
    """
    k = w.data.shape[0]
    r = k // 2
    B, H, W, C = x.data.shape
    if w.data.shape != (k, k, C):
        raise ShapeError(f"depthwise_conv: weight shape {w.data.shape} != ({k},{k},{C})")
    xp = np.zeros((B, H + 2 * r, W + 2 * r, C))
    xp[:, r : r + H, r : r + W, :] = x.data
    y = np.zeros((B, H, W, C))
    for i in range(k):
        for j in range(k):
            y += w.data[i, j] * xp[:, i : i + H, j : j + W, :]
    y += b.data
    out = Tensor(y, (x, w, b))

    def _bw(g):
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        gc = np.ascontiguousarray(g)
        for i in range(k):
            for j in range(k):
                gw[i, j] = np.einsum("bhwc,bhwc->c", xp[:, i : i + H, j : j + W, :], gc)
                gxp[:, i : i + H, j : j + W, :] += w.data[i, j] * gc
        _accum(x, gxp[:, r : r + H, r : r + W, :])
        _accum(w, gw)
        _accum(b, gc.sum(axis=(0, 1, 2)))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention(q, k, v, return_weights: bool = False):
    """Scaled dot-product attention: softmax(Q K^T / sqrt(d_k)) V.

    Works on Tensors or plain arrays; shapes (..., n, d_k), (..., n, d_k),
    (..., n, d_v) with matching leading dims. Softmax rows are computed with
    max subtraction. Returns the attended values, plus the row-stochastic
    weight matrix when `return_weights` is set.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    if q.data.ndim < 2 or k.data.ndim < 2 or v.data.ndim < 2:
        raise ShapeError("attention: Q, K, V must be at least 2-D")
    if q.data.shape[-1] != k.data.shape[-1]:
        raise ShapeError(
            f"attention: d_k mismatch ({q.data.shape[-1]} vs {k.data.shape[-1]})"
        )
    if k.data.shape[-2] != v.data.shape[-2]:
        raise ShapeError(
            f"attention: K has {k.data.shape[-2]} rows but V has {v.data.shape[-2]}"
        )
    if q.data.shape[:-2] != k.data.shape[:-2] or k.data.shape[:-2] != v.data.shape[:-2]:
        raise ShapeError("attention: leading (batch) dims of Q, K, V must match")
    d_k = q.data.shape[-1]
    logits = scale(matmul(q, _swap_last2(k)), 1.0 / math.sqrt(d_k))
    weights = softmax(logits)
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def _swap_last2(t: Tensor) -> Tensor:
    axes = list(range(t.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, axes)


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named trainable tensors with paired gradient slots.

    Names are unique; iteration follows insertion order, which is fixed by the
    architecture builder, so optimizer sweeps are reproducible.
    """

    def __init__(self):
        self._entries: dict[str, Parameter] = {}

    def add(self, name: str, values: np.ndarray) -> Parameter:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name!r}")
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} contains non-finite values")
        p = Parameter(arr)
        self._entries[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def num_scalars(self) -> int:
        return sum(p.data.size for p in self._entries.values())

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.grad = None

    def fill_missing_grads(self) -> None:
        """Parameters outside the active graph (e.g. the thermal branch's
        illumination-map head, whose output is unused) get explicit zero
        gradients so the optimizer contract holds."""
        for p in self._entries.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)

    def copy_values(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._entries.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        if set(values) != set(self._entries):
            missing = set(self._entries) - set(values)
            extra = set(values) - set(self._entries)
            raise ValueError(f"parameter name mismatch: missing={missing}, extra={extra}")
        for n, p in self._entries.items():
            arr = np.asarray(values[n], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {n!r}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()
