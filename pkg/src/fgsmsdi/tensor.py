"""Dense tensors with reverse-mode automatic differentiation.

Every op records its inputs and a backward closure on the output tensor, so
the tensors reachable from a loss form the computation graph. :func:`backward`
sorts that graph topologically and runs each closure exactly once. Two losses
built from disjoint tensors never exchange gradients.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]
GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

DEFAULT_DTYPE = np.float32
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when an op receives inputs of incompatible shapes."""


class Tensor:
    """An n-dimensional float array that can take part in a differentiation graph.

    Float64 input stays float64; anything else is stored as :data:`DEFAULT_DTYPE`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "op")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._grad_fn: Optional[GradFn] = None
        self.op = ""

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x: Union[Tensor, ArrayLike], like: Optional[Tensor] = None) -> Tensor:
    """Wrap ``x`` as a constant tensor, matching ``like``'s dtype when given."""
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, grad_fn: GradFn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` tensor reachable from ``loss``.

    Contributions from several uses of one tensor are summed, and a second call
    adds to the grads left by the first.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[Tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar ``c`` (kept in ``a``'s dtype)."""
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.maximum(x.data, x.dtype.type(0)), (x,), "relu",
                 lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), "tanh", lambda g: (g * (1 - y * y),))


def sign(x: Tensor) -> Tensor:
    """Elementwise sign with ``sign(0) = 0``; contributes zero gradient."""
    return _make(np.sign(x.data), (x,), "sign", lambda g: (np.zeros_like(g),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Elementwise clip to ``[lo, hi]``.

    The gradient passes where ``lo < x < hi`` and is zero at clipped coordinates.
    """
    if lo > hi:
        raise ValueError(f"clamp: lower bound {lo} exceeds upper bound {hi}")
    lo_, hi_ = x.dtype.type(lo), x.dtype.type(hi)
    y = np.minimum(np.maximum(x.data, lo_), hi_)
    inside = (x.data > lo_) & (x.data < hi_)
    return _make(y, (x,), "clamp", lambda g: (g * inside,))


def detach(x: Tensor) -> Tensor:
    """Same values, cut off from the graph."""
    out = Tensor(x.data)
    out.op = "detach"
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    shape = x.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / x.dtype.type(n), shape),)

    return _make(np.asarray(x.data.mean(axis=axis)), (x,), "mean", grad_fn)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    shape = x.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), "sum", grad_fn)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _make(y, (x,), "reshape", lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != axis % len(ref) and n != m for i, (n, m) in enumerate(zip(ref, t.shape))
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat",
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), "matmul", lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape ``[out, in]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents: Tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)

    def grad_fn(g):
        grads = [g @ wd if x.requires_grad else None,
                 g.T @ xd if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, "linear", grad_fn)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x [N,C,H,W]`` with ``weight [O,C,kh,kw]``."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} too large for input {x.shape}")

    # Work channels-last so every im2col copy moves contiguous (kw * C) runs.
    xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
    xp[:, padding:padding + h, padding:padding + w, :] = x.data.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    parents: Tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _make(np.ascontiguousarray(out), parents, "conv2d", grad_fn)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
                eps: float = BN_EPS, update_stats: bool = True) -> Tensor:
    """Per-channel batch normalisation of ``x [N,C,H,W]``.

    In training mode the batch statistics normalise the input and, when
    ``update_stats`` is set, ``running_* <- momentum * running_* + (1 - momentum) * batch``
    (in place, unbiased variance). In eval mode only the running statistics are used.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: incompatible shapes {x.shape} and {gamma.shape}")
    axes = (0, 2, 3)
    bshape = (1, -1, 1, 1)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes)
        xc = xd - mu.reshape(bshape)
        var = np.einsum("nchw,nchw->c", xc, xc) / (xd.size // xd.shape[1])
        if update_stats:
            m = xd.size // xd.shape[1]
            unbiased = var * (m / max(m - 1, 1))
            running_mean *= momentum
            running_mean += (1 - momentum) * mu
            running_var *= momentum
            running_var += (1 - momentum) * unbiased
    else:
        mu, var = running_mean, running_var
        xc = xd - mu.reshape(bshape).astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    scale_ = (gamma.data * inv).reshape(bshape)
    xhat = xc * inv.reshape(bshape)
    out = xc * scale_ + beta.data.reshape(bshape)

    def grad_fn(g):
        gg = np.einsum("nchw,nchw->c", g, xhat)
        gb = np.einsum("nchw->c", g)
        if training:
            m = g.size // g.shape[1]
            gx = (scale_ / m) * (m * g - gb.reshape(bshape) - xhat * gg.reshape(bshape))
        else:
            gx = g * scale_
        return gx, gg, gb

    return _make(out, (x, gamma, beta), "batchnorm2d", grad_fn)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits [B,C]`` against integer ``labels [B]``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: incompatible shapes {logits.shape} and {labels.shape}")
    b, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {c}), "
                         f"got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = (logsumexp - z[rows, labels]).mean()

    def grad_fn(g):
        p = np.exp(z - logsumexp[:, None])
        p[rows, labels] -= 1
        return (p * (g / b),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), "softmax_cross_entropy", grad_fn)


def grad_of(loss: Tensor, wrt: Tensor) -> np.ndarray:
    """Gradient of ``loss`` with respect to a single leaf tensor, as an array."""
    wrt.grad = None
    backward(loss)
    if wrt.grad is None:
        return np.zeros_like(wrt.data)
    return wrt.grad
