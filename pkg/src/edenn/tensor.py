"""Dense tensors with reverse-mode differentiation.

Only the operations the decay-convolution math needs are provided. Arrays are
numpy ``float64`` by default; 4-D event volumes use the axis order
``(W, H, C, T)`` and image-like tensors ``(W, H, C)`` with an optional leading
batch axis.

Convolutions use cross-correlation semantics (the kernel is not flipped):

    out[i, j, o] = sum_{u, v, c} x[i*s + u - p, j*s + v - p, c] * k[u, v, c, o]

where ``p = (k - 1) // 2`` for ``same`` padding and ``0`` for ``valid``.
``same`` padding fills with zeros, so plain layers carry a border bias; the
partial modes in :mod:`edenn.edec` are the masked treatment of borders.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

DTYPE = np.float64
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A value in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters; their ``grad``
    is allocated up front so unreachable parameters report a zero gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        op: str = "",
    ):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.grad = np.zeros_like(arr) if (requires_grad and not _parents) else None

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", op={self.op!r}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def abs(self):
        return tabs(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- differentiation ---------------------------------------------------
    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the graph (streaming inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    if not _grad_enabled:
        return Tensor(data, op=op)
    live = tuple(p for p in parents if p.requires_grad)
    return Tensor(data, requires_grad=bool(live), _parents=live, op=op)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                # free intermediate gradients once propagated
                node.grad = None
    loss.grad = np.ones_like(loss.data)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data + b.data, (a, b), "add")

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    out = _result(-a.data, (a,), "neg")
    out._backward = lambda g: _accumulate(a, -g)
    return out


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data * b.data, (a, b), "mul")

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    out._backward = _bw
    return out


def hadamard(a, b) -> Tensor:
    """Elementwise product of equal shapes, or of ``a[..., C]`` with a mask ``b[...]``.

    The second form broadcasts a channel-less mask over ``a``'s last axis.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return mul(a, b)
    if a.ndim == b.ndim + 1 and a.shape[:-1] == b.shape:
        return mul(a, expand_last(b))
    raise ShapeError(f"hadamard: cannot combine shapes {a.shape} and {b.shape}")


def expand_last(a: Tensor) -> Tensor:
    out = _result(a.data[..., None], (a,), "expand")
    out._backward = lambda g: _accumulate(a, g[..., 0])
    return out


def div(num, den) -> Tensor:
    num, den = as_tensor(num), as_tensor(den)
    q = num.data / den.data
    out = _result(q, (num, den), "div")

    def _bw(g):
        if num.requires_grad:
            _accumulate(num, _unbroadcast(g / den.data, num.shape))
        if den.requires_grad:
            _accumulate(den, _unbroadcast(-g * q / den.data, den.shape))

    out._backward = _bw
    return out


def safe_div(num, den, eps: float = 1e-12) -> Tensor:
    """``num / den`` with the result (and its gradient) set to 0 where ``|den| <= eps``."""
    num, den = as_tensor(num), as_tensor(den)
    dead = np.abs(den.data) <= eps
    safe = np.where(dead, 1.0, den.data)
    q = np.where(dead, 0.0, num.data / safe)
    out = _result(q, (num, den), "safe_div")

    def _bw(g):
        g = np.where(dead, 0.0, g)
        if num.requires_grad:
            _accumulate(num, _unbroadcast(g / safe, num.shape))
        if den.requires_grad:
            _accumulate(den, _unbroadcast(-g * q / safe, den.shape))

    out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    out = _result(np.where(pos, a.data, 0.0), (a,), "relu")
    out._backward = lambda g: _accumulate(a, g * pos)
    return out


def identity(a: Tensor) -> Tensor:
    return a


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _result(y, (a,), "tanh")
    out._backward = lambda g: _accumulate(a, g * (1.0 - y * y))
    return out


def tabs(a: Tensor) -> Tensor:
    out = _result(np.abs(a.data), (a,), "abs")
    out._backward = lambda g: _accumulate(a, g * np.sign(a.data))
    return out


def square(a: Tensor) -> Tensor:
    out = _result(a.data * a.data, (a,), "square")
    out._backward = lambda g: _accumulate(a, 2.0 * a.data * g)
    return out


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), "sum")

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape))

    out._backward = _bw
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / n)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _result(a.data.reshape(shape), (a,), "reshape")
    out._backward = lambda g: _accumulate(a, g.reshape(a.shape))
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    out = _result(np.transpose(a.data, axes), (a,), "transpose")
    out._backward = lambda g: _accumulate(a, np.transpose(g, inv))
    return out


def getitem(a: Tensor, idx) -> Tensor:
    out = _result(a.data[idx], (a,), "getitem")

    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def _bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _accumulate(a, full)

    out._backward = _bw
    return out


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    data = np.stack([t.data for t in items], axis=axis)
    out = _result(data, items, "stack")
    ax = axis % data.ndim

    def _bw(g):
        for i, t in enumerate(items):
            _accumulate(t, np.take(g, i, axis=ax))

    out._backward = _bw
    return out


def concat(items: Sequence[Tensor], axis: int = -1) -> Tensor:
    items = [as_tensor(t) for t in items]
    data = np.concatenate([t.data for t in items], axis=axis)
    out = _result(data, items, "concat")
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in items])

    def _bw(g):
        for t, lo, hi in zip(items, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    out._backward = _bw
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data @ b.data, (a, b), "matmul")

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.outer(a.data, g)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.shape))

    out._backward = _bw
    return out


def upsample_nearest(a: Tensor, factor: int, size: tuple[int, int] | None = None) -> Tensor:
    """Repeat the two spatial axes of ``a[..., W, H, C]`` by ``factor``, then crop to ``size``."""
    w_ax, h_ax = a.ndim - 3, a.ndim - 2
    up = np.repeat(np.repeat(a.data, factor, axis=w_ax), factor, axis=h_ax)
    W, H = size if size is not None else (up.shape[w_ax], up.shape[h_ax])
    up = up[..., :W, :H, :]
    out = _result(up, (a,), "upsample")

    def _bw(g):
        w0, h0 = a.shape[w_ax], a.shape[h_ax]
        full = np.zeros(a.shape[:-3] + (w0 * factor, h0 * factor, a.shape[-1]), dtype=g.dtype)
        full[..., :W, :H, :] = g
        lead = a.shape[:-3]
        full = full.reshape(lead + (w0, factor, h0, factor, a.shape[-1]))
        _accumulate(a, full.sum(axis=(len(lead) + 1, len(lead) + 3)))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(n: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-n // stride)
    if padding == "valid":
        if n < k:
            raise ShapeError(f"valid convolution needs input >= kernel ({n} < {k})")
        return (n - k) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def _pad_for(padding: str, k: int) -> int:
    return (k - 1) // 2 if padding == "same" else 0


def _check_conv(x: np.ndarray, k: np.ndarray, stride: int):
    if k.ndim != 4:
        raise ShapeError(f"kernel must be (kw, kh, cin, cout), got {k.shape}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be (W, H, C) or (N, W, H, C), got {x.shape}")
    if x.shape[-1] != k.shape[2]:
        raise ShapeError(f"input has {x.shape[-1]} channels but kernel expects {k.shape[2]}")
    if k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ShapeError(f"kernel spatial size must be odd, got {k.shape[:2]}")
    if stride < 1:
        raise ValueError("stride must be >= 1")


def conv2d_array(x: np.ndarray, k: np.ndarray, stride: int = 1, padding: str = "same") -> np.ndarray:
    """Non-differentiable convolution on raw arrays (same contract as :func:`conv2d`)."""
    _check_conv(x, k, stride)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    kw, kh = k.shape[:2]
    pw, ph = _pad_for(padding, kw), _pad_for(padding, kh)
    N, W, H, _ = x.shape
    Wo = conv_output_size(W, kw, stride, padding)
    Ho = conv_output_size(H, kh, stride, padding)
    # enough right-padding that every strided window exists
    xp = np.zeros((N, max(W + 2 * pw, (Wo - 1) * stride + kw), max(H + 2 * ph, (Ho - 1) * stride + kh), x.shape[3]), dtype=np.result_type(x, k))
    xp[:, pw:pw + W, ph:ph + H, :] = x
    out = np.zeros((N, Wo, Ho, k.shape[3]), dtype=xp.dtype)
    for u in range(kw):
        for v in range(kh):
            patch = xp[:, u:u + stride * Wo:stride, v:v + stride * Ho:stride, :]
            out += patch @ k[u, v]
    return out if batched else out[0]


def conv2d(x, k, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation of ``x[(N,) W, H, Cin]`` with ``k[kw, kh, Cin, Cout]``."""
    x, k = as_tensor(x), as_tensor(k)
    y = conv2d_array(x.data, k.data, stride, padding)
    out = _result(y, (x, k), "conv2d")

    def _bw(g):
        xd = x.data if x.ndim == 4 else x.data[None]
        gd = g if g.ndim == 4 else g[None]
        kw, kh = k.shape[:2]
        pw, ph = _pad_for(padding, kw), _pad_for(padding, kh)
        N, W, H, C = xd.shape
        Wo, Ho = gd.shape[1:3]
        shape = (N, max(W + 2 * pw, (Wo - 1) * stride + kw), max(H + 2 * ph, (Ho - 1) * stride + kh), C)
        if k.requires_grad:
            xp = np.zeros(shape, dtype=xd.dtype)
            xp[:, pw:pw + W, ph:ph + H, :] = xd
            gk = np.zeros_like(k.data)
            g2 = gd.reshape(-1, gd.shape[3])
            for u in range(kw):
                for v in range(kh):
                    patch = xp[:, u:u + stride * Wo:stride, v:v + stride * Ho:stride, :]
                    gk[u, v] = patch.reshape(-1, C).T @ g2
            _accumulate(k, gk)
        if x.requires_grad:
            gxp = np.zeros(shape, dtype=gd.dtype)
            for u in range(kw):
                for v in range(kh):
                    gxp[:, u:u + stride * Wo:stride, v:v + stride * Ho:stride, :] += gd @ k.data[u, v].T
            gx = gxp[:, pw:pw + W, ph:ph + H, :]
            _accumulate(x, gx if x.ndim == 4 else gx[0])

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# temporal decay


def decay_matrix(gamma: np.ndarray, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Lower-triangular taps ``D[c, t, tau] = gamma[c] ** (t - tau)`` for ``tau <= t``.

    Also returns the elementwise derivative with respect to ``gamma``. ``0 ** 0`` is 1.
    """
    lag = np.arange(T)[:, None] - np.arange(T)[None, :]
    causal = lag >= 0
    lagc = np.where(causal, lag, 0)
    g = np.asarray(gamma, dtype=DTYPE).reshape(-1, 1, 1)
    D = np.where(causal, g ** lagc, 0.0)
    dD = np.where(lagc >= 1, lagc * g ** np.maximum(lagc - 1, 0), 0.0) * causal
    return D, dD


def causal_decay(z, gamma, axis: int = 0) -> Tensor:
    """Full-history temporal convolution with exponentially decaying taps.

    ``out[t, ..., c] = sum_{tau <= t} gamma[c] ** (t - tau) * z[tau, ..., c]``
    with time on ``axis`` and channels on the last axis.
    """
    z, gamma = as_tensor(z), as_tensor(gamma)
    C = z.shape[-1]
    axis = axis % z.ndim
    if axis == z.ndim - 1:
        raise ShapeError("time axis cannot be the channel axis")
    T = z.shape[axis]
    if gamma.shape not in ((C,), (1,), ()):
        raise ShapeError(f"gamma shape {gamma.shape} does not match {C} channels")
    gvec = np.broadcast_to(gamma.data.reshape(-1), (C,))
    D, dD = decay_matrix(gvec, T)

    def to_ctm(a):  # [..., T, ..., C] -> [C, T, M]
        a = np.moveaxis(a, axis, 0)
        rest = a.shape[1:-1]
        return np.ascontiguousarray(np.moveaxis(a.reshape(T, -1, C), 2, 0)), rest

    def from_ctm(a, rest):
        a = np.moveaxis(a, 0, 2).reshape((T,) + rest + (C,))
        return np.moveaxis(a, 0, axis)

    zc, rest = to_ctm(z.data)
    out = _result(from_ctm(D @ zc, rest), (z, gamma), "causal_decay")

    def _bw(g):
        gc, _ = to_ctm(g)
        if z.requires_grad:
            _accumulate(z, from_ctm(np.swapaxes(D, 1, 2) @ gc, rest))
        if gamma.requires_grad:
            outer = gc @ np.swapaxes(zc, 1, 2)  # [C, T, T]
            gg = (outer * dD).sum(axis=(1, 2))
            _accumulate(gamma, gg.reshape(gamma.shape) if gamma.shape == (C,) else gg.sum().reshape(gamma.shape))

    out._backward = _bw
    return out


def decay_taps(gamma, n: int) -> Tensor:
    """``taps[c, s] = gamma[c] ** (n - 1 - s)`` for ``s = 0..n-1``: the newest tap is 1."""
    gamma = as_tensor(gamma)
    D, dD = decay_matrix(gamma.data.reshape(-1), n)
    out = _result(D[:, n - 1, :].reshape(gamma.shape + (n,)), (gamma,), "decay_taps")

    def _bw(g):
        gg = (g.reshape(-1, n) * dD[:, n - 1, :]).sum(axis=1)
        _accumulate(gamma, gg.reshape(gamma.shape))

    out._backward = _bw
    return out


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t.is_leaf]
