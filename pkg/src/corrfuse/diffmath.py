"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`.  When any input requires a
gradient the result keeps references to its parents plus a closure mapping the
upstream gradient to one gradient per parent.  :class:`Tape` orders those nodes
topologically and replays the closures in reverse.

Matrices follow the row-vector convention used throughout the package: a
linear map is ``x @ W`` with ``W`` stored as ``(in, out)``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

NEG_INF = -np.inf


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class InvalidMaskError(ValueError):
    """A softmax slice has every entry masked out."""


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
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
    def T(self) -> "Tensor":
        return swap_last(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Populate ``.grad`` on every differentiable ancestor of this tensor."""
        Tape.record(self).replay(self, grad)

    # -- operator sugar ---------------------------------------------------
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class Tape:
    """Topologically ordered record of the operations behind one output.

    Nodes appear parents-first, so reverse order visits every node after all
    of its consumers have contributed to its gradient.  Each edge is replayed
    exactly once and gradients accumulate with ``+=``, which is what makes a
    parameter shared by several consumers come out right.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, output: Tensor, grad=None) -> None:
        if not output.requires_grad:
            return
        seed = np.ones_like(output.data) if grad is None else _as_array(grad)
        if seed.shape != output.shape:
            raise DimensionError(f"seed gradient shape {seed.shape} != output shape {output.shape}")
        # intermediate gradients are per-replay; leaves keep accumulating
        for node in self.nodes:
            if node._backward is not None:
                node.grad = None
        if output._backward is None and output.grad is not None:
            output.grad = output.grad + seed
        else:
            output.grad = seed
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad = parent.grad + g


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # two-branch form avoids exp overflow for large |x|
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    """``x`` for ``x >= 0`` else ``slope * x``; the subgradient at 0 is ``slope``."""
    a = as_tensor(a)
    positive = a.data > 0
    out = np.where(positive, a.data, slope * a.data)
    return _node(out, (a,), lambda g: (np.where(positive, g, slope * g),))


def clip(a, low: float, high: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return _node(np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


# -- linear algebra and shape ops ---------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward)


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(np.asarray(out, dtype=np.float64), (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    sizes = [p.shape[axis] if p.ndim else 1 for p in parts]
    try:
        out = np.concatenate([np.atleast_1d(p.data) for p in parts], axis=axis)
    except ValueError as err:
        raise DimensionError(f"concat shape mismatch: {[p.shape for p in parts]}") from err
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, bounds, axis=axis)
        return [piece.reshape(p.shape) for piece, p in zip(pieces, parts)]

    return _node(out, parts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise DimensionError(f"stack shape mismatch: {[p.shape for p in parts]}")
    out = np.stack([p.data for p in parts], axis=axis)

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(parts))]

    return _node(out, parts, backward)


def take(a, index) -> Tensor:
    """Differentiable ``a[index]`` for any numpy index expression."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(a.data[index], dtype=np.float64), (a,), backward)


# -- softmax ---------------------------------------------------------------------

def mask_from_present(present) -> np.ndarray:
    """Map booleans (True = keep) to the additive ``{0, -inf}`` mask."""
    return np.where(np.asarray(present, dtype=bool), 0.0, NEG_INF)


def masked_softmax(logits, mask=None, axis: int = -1) -> Tensor:
    """Softmax of ``logits + mask`` along ``axis``.

    ``mask`` is additive with entries in ``{0, -inf}`` and broadcasts against
    ``logits``.  The maximum is taken over unmasked entries only, masked
    outputs are exactly zero, and so are the gradients flowing into them.
    """
    logits = as_tensor(logits)
    z = logits.data if mask is None else logits.data + np.asarray(mask, dtype=np.float64)
    if mask is not None and not np.all(np.any(np.isfinite(z), axis=axis)):
        raise InvalidMaskError("masked_softmax: every entry of some slice is masked")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (logits,), backward)


def softmax(logits, axis: int = -1) -> Tensor:
    return masked_softmax(logits, None, axis=axis)


# -- gradient checking ------------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is zero (masked attention
    slots, dead units) from dividing finite-difference roundoff by zero.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / scale))


def numerical_gradient(fn: Callable[[], Tensor], target: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` w.r.t. ``target.data``."""
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn().data.sum()
        flat[i] = orig - h
        minus = fn().data.sum()
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def check_gradients(fn: Callable[[], Tensor], params: Iterable[Tensor] | dict,
                    h: float = 1e-5) -> dict[str, float]:
    """Compare tape gradients with central differences for each parameter.

    ``fn`` must rebuild the scalar output from the current parameter values on
    every call.  Returns the maximum relative error per parameter.
    """
    named = params.items() if isinstance(params, dict) else (
        (p.name or f"param{i}", p) for i, p in enumerate(params))
    named = list(named)
    for _, p in named:
        p.grad = None
    out = fn()
    out.backward()
    report = {}
    for name, p in named:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        report[name] = relative_error(analytic, numerical_gradient(fn, p, h))
    return report


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int | None = None,
                   name: str | None = None) -> Tensor:
    """Trainable tensor drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    shape = tuple(shape)
    fan_in = fan_in if fan_in is not None else shape[-2] if len(shape) > 1 else shape[0]
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros_param(shape, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)
