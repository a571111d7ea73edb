"""Dense arrays with reverse-mode differentiation.

Every model and loss computation runs on :class:`Tensor`. A tensor wraps a
numpy array; operations built from the functions in this module record a
backward closure so that :meth:`Tensor.backward` can push gradients to every
reachable leaf created with ``requires_grad=True``.

Two precision modes exist. ``float64`` is used for finite-difference checks,
``float32`` for training. The active mode decides the dtype of newly created
tensors::

    with precision("float64"):
        x = Tensor(np.ones(3), requires_grad=True)
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Iterator, Sequence

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}
_active_dtype: type = np.float64


def get_dtype() -> type:
    return _active_dtype


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors."""
    global _active_dtype
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}")
    previous = _active_dtype
    _active_dtype = _DTYPES[mode]
    try:
        yield
    finally:
        _active_dtype = previous


def set_precision(mode: str) -> None:
    global _active_dtype
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}")
    _active_dtype = _DTYPES[mode]


class Tensor:
    """An array node in a differentiation graph.

    ``grad`` is an accumulator of the same shape as ``data``; it starts at
    zero and backward passes add into it. Callers zero it between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _active_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is not None:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list[Tensor]:
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


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.data.dtype if like is not None else None)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    live = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in live)
    out._parents = live if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = b

        def backward_const(g):
            return (g * c,)

        return _make(a.data * c, (a,), backward_const)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def where(condition: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``condition`` holds, else from ``b``.

    The unselected side receives an exactly-zero gradient and its values
    never reach the output, so content at unselected positions is invisible.
    """
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    cond = np.asarray(condition, dtype=bool)
    out = np.where(cond, a.data, b.data)
    zero = np.zeros((), dtype=out.dtype)

    def backward(g):
        ga = np.where(cond, g, zero)
        gb = np.where(cond, zero, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Gaussian-error linear unit, tanh form: 0.5 x (1 + tanh(c (x + a x^3)))."""
    xd = x.data
    th = xd * xd
    th *= _GELU_A
    th += 1.0
    th *= xd
    th *= _GELU_C
    np.tanh(th, out=th)
    out = th + 1.0
    out *= xd
    out *= 0.5

    def backward(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3 a x^2)
        slope = xd * xd
        slope *= 3.0 * _GELU_A * _GELU_C
        slope += _GELU_C
        sech2 = th * th
        np.subtract(1.0, sech2, out=sech2)
        slope *= sech2
        slope *= xd
        slope += th
        slope += 1.0
        slope *= 0.5
        slope *= g
        return (slope,)

    return _make(out, (x,), backward)


# ------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")

    # a weight shared over leading axes: fold them into a single 2-D product
    shared = b.ndim == 2 and a.ndim > 2

    def backward(g):
        ga = gb = None
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    if shared:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data
    return _make(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias with ``weight`` shaped (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ----------------------------------------------------------------- shaping


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _make(x.data.transpose(axes), (x,), backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, slice, np.integer)) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def backward(g):
        out = np.zeros_like(x.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), backward)


def permute(x: Tensor, perm: np.ndarray, axis: int) -> Tensor:
    """Reorder ``x`` along ``axis`` by per-slice permutations ``perm``.

    ``perm`` broadcasts like :func:`numpy.take_along_axis` indices with the
    trailing axes dropped; each slice must be a bijection.
    """
    axis = axis % x.ndim
    idx = np.asarray(perm, dtype=np.intp).reshape(perm.shape + (1,) * (x.ndim - axis - 1))
    inverse = np.argsort(perm, axis=-1).reshape(idx.shape)

    def backward(g):
        return (np.take_along_axis(g, inverse, axis=axis),)

    return _make(np.take_along_axis(x.data, idx, axis=axis), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), backward)


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _make(table.data[idx], (table,), backward)


# --------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    scale = 1.0 / float(count)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, x.shape).copy(),)

    return _make(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward)


# ----------------------------------------------------------- normalization


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Divide by the L2 norm along ``axis``; a zero-norm slice is an error."""
    x = _as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ZeroDivisionError("l2_normalize: input has zero norm")
    y = x.data / norm

    def backward(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - y * dot) / norm,)

    return _make(y, (x,), backward)


def softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError("softmax temperature must be positive")
    x = _as_tensor(x)
    z = x.data / temperature if temperature != 1.0 else x.data
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = np.sum(g * p, axis=axis, keepdims=True)
        gx = p * (g - inner)
        return (gx / temperature if temperature != 1.0 else gx,)

    return _make(p, (x,), backward)


def row_softmax(x, temperature: float = 1.0) -> np.ndarray:
    """Plain-array softmax of a vector at a given temperature."""
    return softmax(Tensor(x), axis=-1, temperature=temperature).data


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row ``logsumexp(row) - row[target]`` for a 2-D logit matrix."""
    t = np.asarray(targets, dtype=np.intp)
    rows = np.arange(logits.shape[0])
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    out = np.log(s[:, 0]) - z[rows, t]

    def backward(g):
        gx = e / s
        gx[rows, t] -= 1.0
        return (gx * g[:, None],)

    return _make(out, (logits,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit population variance."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ValueError("layer_norm: gain/bias length must match the normalized axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = gxh = None
        if x.requires_grad:
            gxh = g * gain.data
            n = x.shape[-1]
            gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                        - xhat * (gxh * xhat).sum(axis=-1, keepdims=True) / n)
        return (gx,
                _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None,
                _unbroadcast(g, bias.shape) if bias.requires_grad else None)

    return _make(out, (x, gain, bias), backward)


# ---------------------------------------------------------- verification


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare backward gradients with central differences.

    ``f`` recomputes the scalar output from the current parameter values. The
    result is the max over checked entries of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``. With
    ``max_entries`` set, a random subset of entries per parameter is checked.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        p.zero_grad()
    out = f()
    out.backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        ga_flat = ga.reshape(-1)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            a = ga_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
