"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is dynamic: every op on a tracked tensor records its parents and
a closure that maps the output gradient to parent gradients.  ``backward``
walks the recorded ops once in reverse topological order and then frees the
graph.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "retains_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.retains_grad = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.retains_grad = False
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(self.data + other.data, (self, other), bw, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._make(self.data - other.data, (self, other), bw, "sub")

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data

        def bw(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._make(a * b, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data

        def bw(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._make(a / b, (self, other), bw, "div")

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, q: int):
        return elem_pow(self, q)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(out, dtype=np.float64), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# -- elementwise ops ------------------------------------------------------------


def elem_pow(x: Tensor, q: int) -> Tensor:
    """Elementwise integer power ``x**q`` for ``q >= 1``."""
    if int(q) != q or q < 1:
        raise ValueError(f"elem_pow: power must be a positive integer, got {q!r}")
    q = int(q)
    if q == 1:
        return Tensor._make(x.data, (x,), lambda g: (g,), "pow1")
    xd = x.data
    lower = _int_power(xd, q - 1)
    out = lower * xd

    def bw(g):
        return (g * (q * lower),)

    return Tensor._make(out, (x,), bw, f"pow{q}")


def _int_power(a: np.ndarray, q: int) -> np.ndarray:
    # repeated multiplication; faster than the generic float pow for small q
    out = a.copy()
    for _ in range(q - 1):
        out *= a
    return out


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return Tensor._make(out, (x,), bw, "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return Tensor._make(x.data * mask, (x,), bw, "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), bw, "log_softmax")


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), bw, "softmax")


def dropout(x: Tensor, rate: float, seed: int) -> Tensor:
    """Inverted dropout with a mask drawn from ``seed``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    rng = np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# -- spatial ops ----------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation.  x: (N, C, H, W), weight: (K, C, kh, kw), bias: (K,)."""
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-D (N, C, H, W), got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: kernel must be 4-D (K, C, kh, kw), got shape {weight.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    n, c, h, w = x.shape
    k, kc, kh, kw = weight.shape
    if kc != c:
        raise ValueError(f"conv2d: channel mismatch, input has C={c} but kernel has C={kc}")
    if kh > h + 2 * pad:
        raise ValueError(f"conv2d: kernel height {kh} exceeds padded input height {h + 2 * pad}")
    if kw > w + 2 * pad:
        raise ValueError(f"conv2d: kernel width {kw} exceeds padded input width {w + 2 * pad}")
    if bias is not None and bias.shape != (k,):
        raise ValueError(f"conv2d: bias must have shape ({k},), got {bias.shape}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1

    pointwise = kh == 1 and kw == 1 and stride == 1 and pad == 0
    xd = np.ascontiguousarray(x.data)
    parents = (x, weight) if bias is None else (x, weight, bias)
    need_x = x.requires_grad
    if stride == 1 and not pointwise:
        return _conv2d_shifted(x, weight, bias, pad, parents)

    if pointwise:
        cols = xd.reshape(n, c, h * w)
    else:
        cols = kernels.im2col(xd, kh, kw, stride, pad)
    w2 = weight.data.reshape(k, c * kh * kw)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, k, ho, wo)

    def bw(g):
        g = g.reshape(n, k, ho * wo)
        dw = np.zeros((k, c * kh * kw))
        for i in range(n):
            dw += g[i] @ cols[i].T
        grads = [None, dw.reshape(weight.shape)]
        if need_x:
            dcols = np.matmul(w2.T, g)
            if pointwise:
                grads[0] = dcols.reshape(n, c, h, w)
            else:
                grads[0] = kernels.col2im(dcols, n, c, h, w, kh, kw, stride, pad)
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return Tensor._make(out, parents, bw, "conv2d")


def _conv2d_shifted(x: Tensor, weight: Tensor, bias: Tensor | None, pad: int, parents) -> Tensor:
    # stride-1 path: one GEMM per kernel offset over the flattened padded batch
    n, c, h, w = x.shape
    k, _, kh, kw = weight.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = hp - kh + 1, wp - kw + 1
    xp = kernels.pad_flat(np.ascontiguousarray(x.data), pad, kw)
    wt = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))
    flat = kernels.conv_flat_forward(xp, wt, n, hp, wp)
    out = flat.reshape(k, n, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]
    need_x = x.requires_grad

    def bw(g):
        gp = np.zeros((k, n, hp, wp))
        gp[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        dw, dxp = kernels.conv_flat_backward(gp.reshape(k, n * hp * wp), xp, wt, n, hp, wp, need_x)
        grads = [None, np.ascontiguousarray(dw.transpose(2, 3, 0, 1))]
        if need_x:
            dx = dxp[:, :n * hp * wp].reshape(c, n, hp, wp)[:, :, pad:pad + h, pad:pad + w]
            grads[0] = np.ascontiguousarray(dx.transpose(1, 0, 2, 3))
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._make(out, parents, bw, "conv2d")


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ValueError(f"maxpool2d: window {k} larger than feature map {h}x{w}")
    out, argmax = kernels.maxpool_forward(np.ascontiguousarray(x.data), k, stride)

    def bw(g):
        return (kernels.maxpool_backward(np.ascontiguousarray(g), argmax, h, w),)

    return Tensor._make(out, (x,), bw, "maxpool2d")


def avgpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling (stride k)."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avgpool2d: spatial extent {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        g = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (g / (k * k),)

    return Tensor._make(out, (x,), bw, "avgpool2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the two trailing axes."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), bw, "upsample2x")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels: both operands must be 4-D")
    for axis, name in ((0, "N"), (2, "H"), (3, "W")):
        if a.shape[axis] != b.shape[axis]:
            raise ValueError(
                f"concat_channels: {name} mismatch ({a.shape[axis]} vs {b.shape[axis]})"
            )
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def bw(g):
        return g[:, :ca], g[:, ca:]

    return Tensor._make(out, (a, b), bw, "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return Tensor._make(x.data[:, start:stop].copy(), (x,), bw, "slice")


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` (the axis is dropped)."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return Tensor._make(np.take(x.data, index, axis=axis), (x,), bw, "take")


# -- backward ---------------------------------------------------------------------


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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked leaf reachable from scalar ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are
    discarded unless ``retains_grad`` is set.  The graph is freed afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not connected to any tensor that requires grad")
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node.retains_grad:
            node.grad = g.copy()
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    for node in order:
        node._parents = ()
        node._backward = None


Tensor.backward = backward  # type: ignore[attr-defined]


# -- finite-difference verification --------------------------------------------------


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Iterable[Tensor],
    eps: float = 1e-5,
    seed: int = 0,
    max_elements: int | None = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f(*inputs)`` may return any shape; it is contracted against a fixed
    random projection so the full Jacobian is exercised.  Inputs are
    perturbed in place, so ``f`` may also reach them through closures.
    When ``max_elements`` is given, a seeded random subset of each input's
    entries is checked.
    """
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    out = f(*inputs)
    proj = rng.standard_normal(out.shape)

    def scalar() -> float:
        with no_grad():
            return float((f(*inputs).data * proj).sum())

    loss = (out * Tensor(proj)).sum()
    backward(loss)

    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = scalar()
            flat[i] = orig - eps
            down = scalar()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
