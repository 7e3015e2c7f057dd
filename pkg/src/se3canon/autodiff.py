"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable quantity in this package is a :class:`Tensor`: a numpy
array plus an optional link back into the expression graph that produced it.
Gradients are exact (analytic) and deterministic; there is no graph caching,
tracing or fusion. The op set is intentionally small -- just what the
equivariant networks, the orthogonalization step and the generative heads
need.

Shape conventions follow numpy broadcasting. All data is float64.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A float64 array with an optional reverse-mode gradient tape entry.

    ``requires_grad`` is sticky: any op with a grad-requiring input produces a
    grad-requiring output. Constant subgraphs are never traversed during
    backprop.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def backward(self, grad: Array | None = None) -> None:
        """Backpropagate from this node, accumulating into ``.grad`` of leaves."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        # iterative post-order over the grad-requiring subgraph
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64) if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data,
        _parents=(a, b),
        _vjp=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data - b.data,
        _parents=(a, b),
        _vjp=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data,
        _parents=(a, b),
        _vjp=lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data / b.data,
        _parents=(a, b),
        _vjp=lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(-a.data, _parents=(a,), _vjp=lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data * a.data, _parents=(a,), _vjp=lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g * out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor(out, _parents=(a,), _vjp=lambda g: (g * (1.0 - out * out),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.sin(a.data), _parents=(a,), _vjp=lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.cos(a.data), _parents=(a,), _vjp=lambda g: (-g * np.sin(a.data),))


def atan2(y, x) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    denom = x.data * x.data + y.data * y.data
    return Tensor(
        np.arctan2(y.data, x.data),
        _parents=(y, x),
        _vjp=lambda g: (
            _unbroadcast(g * x.data / denom, y.shape),
            _unbroadcast(-g * y.data / denom, x.shape),
        ),
    )


def clip_min(a, floor: float) -> Tensor:
    """max(a, floor) with zero gradient where the floor is active."""
    a = as_tensor(a)
    return Tensor(
        np.maximum(a.data, floor),
        _parents=(a,),
        _vjp=lambda g: (g * (a.data > floor),),
    )


# linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")

    def vjp(g: Array):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor(a.data @ b.data, _parents=(a, b), _vjp=vjp)


def cross(a, b) -> Tensor:
    """Cross product along the last axis (size 3)."""
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        np.cross(a.data, b.data),
        _parents=(a, b),
        _vjp=lambda g: (
            _unbroadcast(np.cross(b.data, g), a.shape),
            _unbroadcast(np.cross(g, a.data), b.shape),
        ),
    )


def vnorm(a, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm along ``axis``; gradient is 0 at the origin."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=keepdims))

    def vjp(g: Array):
        safe = np.where(n > 0.0, n, 1.0)
        gk = g if keepdims else np.expand_dims(g, axis)
        sk = safe if keepdims else np.expand_dims(safe, axis)
        return (gk * a.data / sk,)

    return Tensor(n, _parents=(a,), _vjp=vjp)


# reductions ----------------------------------------------------------------


def _expand_reduced(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    if axis is None:
        return np.broadcast_to(g, shape).copy() if keepdims else np.full(shape, g)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return Tensor(
        np.sum(a.data, axis=axis, keepdims=keepdims),
        _parents=(a,),
        _vjp=lambda g: (_expand_reduced(g, a.shape, axis, keepdims),),
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return Tensor(
        np.mean(a.data, axis=axis, keepdims=keepdims),
        _parents=(a,),
        _vjp=lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,),
    )


def amax(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; subgradient routes to the first argmax (ties)."""
    a = as_tensor(a)
    out = np.max(a.data, axis=axis, keepdims=keepdims)
    idx = np.argmax(a.data, axis=axis)

    def vjp(g: Array):
        gk = g if keepdims else np.expand_dims(g, axis)
        z = np.zeros_like(a.data)
        np.put_along_axis(z, np.expand_dims(idx, axis), gk, axis=axis)
        return (z,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


# shape manipulation --------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor(
        a.data.reshape(shape),
        _parents=(a,),
        _vjp=lambda g: (g.reshape(a.shape),),
    )


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return Tensor(
        np.swapaxes(a.data, ax1, ax2),
        _parents=(a,),
        _vjp=lambda g: (np.swapaxes(g, ax1, ax2),),
    )


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def vjp(g: Array):
        z = np.zeros(a.shape)
        if advanced:
            np.add.at(z, idx, g)  # integer-array indices may repeat
        else:
            z[idx] = g  # basic indexing never aliases
        return (z,)

    return Tensor(a.data[idx], _parents=(a,), _vjp=vjp)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g: Array):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), _parents=tuple(parts), _vjp=vjp)


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]

    def vjp(g: Array):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(parts)))

    return Tensor(np.stack([p.data for p in parts], axis=axis), _parents=tuple(parts), _vjp=vjp)


def gather_rows(a, idx: Array) -> Tensor:
    """Gather rows of ``a`` (..., N, D) with integer ``idx`` (..., N, q).

    Output (..., N, q, D): out[..., i, k, :] = a[..., idx[..., i, k], :].
    The index table is a constant; gradients flow only through ``a``.
    """
    a = as_tensor(a)
    lead = a.shape[:-2]
    n, d = a.shape[-2:]
    if idx.shape[: len(lead)] != lead:
        raise ValueError("gather_rows: leading dims of idx must match the source")
    flat = a.data.reshape(-1, n, d)
    fidx = idx.reshape(flat.shape[0], *idx.shape[len(lead):])
    rows = np.arange(flat.shape[0])[:, None, None]
    out = flat[rows, fidx]

    def vjp(g: Array):
        z = np.zeros_like(flat)
        np.add.at(z, (rows, fidx), g.reshape(out.shape))
        return (z.reshape(a.shape),)

    return Tensor(out.reshape(*lead, *fidx.shape[1:], d), _parents=(a,), _vjp=vjp)


# optimization --------------------------------------------------------------


class Adam:
    """Gradient descent with bias-corrected first/second moment accumulation."""

    def __init__(self, params: Iterable[Tensor], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            mhat = m / (1.0 - b1 ** self.t)
            vhat = v / (1.0 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def numeric_gradient(fn: Callable[[], float], tensors: Sequence[Tensor],
                     step: float = 1e-5) -> list[Array]:
    """Central finite differences of the scalar ``fn()`` w.r.t. each tensor.

    ``fn`` must re-evaluate the expression from the tensors' current ``.data``
    (the entries are perturbed in place and restored).
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat, gf = t.data.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn()
            flat[i] = orig - step
            lo = fn()
            flat[i] = orig
            gf[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def relative_gradient_error(analytic: Sequence[Array], numeric: Sequence[Array]) -> float:
    """Vector-norm relative error between two gradient collections."""
    a = np.concatenate([np.ravel(g) for g in analytic])
    n = np.concatenate([np.ravel(g) for g in numeric])
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), 1e-12)
    return float(np.linalg.norm(a - n)) / denom
