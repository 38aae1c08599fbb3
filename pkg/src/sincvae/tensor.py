"""Dense tensors with define-by-run reverse-mode differentiation and Adam.

A :class:`Tensor` wraps a numpy array. Every operation on tensors returns a
new tensor that remembers its parents and a closure mapping the output
gradient to one gradient per parent. :func:`backward` walks that graph once in
reverse topological order. Graphs are single use: after a backward pass the
closures are released and a second pass raises.

Convolution follows the deep-learning convention (cross-correlation). With
``padding="same"`` the output length is ``ceil(T / stride)`` and any odd pad
sample goes on the right.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch new tensors to ``float32`` (speed) or back to ``float64``."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


def _contiguous(data):
    # np.ascontiguousarray would promote 0-d arrays to shape (1,)
    a = np.asarray(data, dtype=_DTYPE)
    return a if a.flags.c_contiguous else a.copy(order="C")


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = _contiguous(data)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward_fn, op) -> Tensor:
    """Record an operation output.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per parent,
    each shaped like that parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = _contiguous(data)
    if not np.isfinite(out.data).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    out.requires_grad = any(p.requires_grad for p in parents)
    out.name = None
    out.grad = None
    out._op = op
    out._consumed = False
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


# elementwise binary ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return make_node(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return make_node(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return make_node(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not compatible")
    return make_node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def dense(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# elementwise unary ----------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return make_node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def identity(x) -> Tensor:
    return as_tensor(x)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):  # overflow surfaces as a non-finite error below
        y = np.exp(x.data)
    return make_node(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if (x.data <= 0).any():
        raise FloatingPointError("log of non-positive value")
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def square(x) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


ACTIVATIONS = {"relu": relu, "tanh": tanh, "identity": identity}


def activation(name):
    try:
        return ACTIVATIONS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}") from None


# reductions and shape -------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return make_node(y, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    y = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return make_node(y, (x,), backward, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return make_node(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    y = x.data[index]

    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in
                (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return make_node(y, (x,), backward, "slice")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_node(y, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# normalization --------------------------------------------------------------

def layer_norm(x, axis=-1, eps=1e-5) -> Tensor:
    """Normalize to zero mean, unit variance along ``axis`` (no affine part)."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return make_node(xhat, (x,), backward, "layer_norm")


# convolution ----------------------------------------------------------------

def same_padding(T, K, stride=1):
    """(left, right) pad so that the output length is ceil(T / stride)."""
    out = -(-T // stride)
    total = max((out - 1) * stride + K - T, 0)
    return total // 2, total - total // 2


def conv1d(x, weight, bias=None, stride=1, padding="valid") -> Tensor:
    """Multi-channel 1-D cross-correlation.

    ``x`` is (batch, in_channels, time), ``weight`` is (out_channels,
    in_channels, kernel). ``padding`` is ``"valid"``, ``"same"`` or an int
    applied on both sides.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} and kernel {weight.shape} are not compatible")
    if stride < 1:
        raise ValueError("conv1d: stride must be >= 1")
    T, K = x.shape[2], weight.shape[2]
    if padding == "valid":
        left = right = 0
    elif padding == "same":
        left, right = same_padding(T, K, stride)
    elif isinstance(padding, int) and padding >= 0:
        left = right = padding
    else:
        raise ValueError(f"conv1d: unknown padding {padding!r}")
    if T + left + right < K:
        raise ShapeError(f"conv1d: input length {T} shorter than kernel {K}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if left or right else x.data
    y = kernels.conv1d_forward(xp, weight.data, stride)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv1d: bias {bias.shape} does not match {weight.shape[0]} outputs")
        y = y + bias.data[None, :, None]
        parents.append(bias)
    Tp = xp.shape[2]

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gx = kernels.conv1d_backward_input(g, weight.data, stride, Tp)[:, :, left:Tp - right]
        if weight.requires_grad:
            gw = kernels.conv1d_backward_weight(g, xp, stride, K)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return make_node(y, parents, backward, "conv1d")


def upsample1d(x, factor=2) -> Tensor:
    """Nearest-neighbour upsampling along the last axis."""
    x = as_tensor(x)
    y = np.repeat(x.data, factor, axis=-1)

    def backward(g):
        return (g.reshape(*g.shape[:-1], -1, factor).sum(axis=-1),)

    return make_node(y, (x,), backward, "upsample1d")


# backward pass --------------------------------------------------------------

def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss: Tensor) -> dict:
    """Propagate d(loss)/d(.) to every leaf with ``requires_grad``.

    Sets ``leaf.grad`` for each such leaf (overwriting any previous value) and
    returns ``{leaf: grad}``. The graph is released afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; run the forward pass again")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any parameter")
    order = _topological(loss)
    grads = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if node.requires_grad:
                if g is None:
                    g = np.zeros(node.shape, dtype=node.data.dtype)
                node.grad = np.array(g, dtype=node.data.dtype)
                leaves[node] = node.grad
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True
    return leaves


# Adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, names=None):
    """One bias-corrected Adam update.

    Pure: returns ``(new_params, new_state)`` and leaves the inputs untouched.
    """
    if len(params) != len(grads):
        raise ShapeError("adam_step: params and grads differ in length")
    names = names or [f"param[{i}]" for i in range(len(params))]
    for p, g, n in zip(params, grads, names):
        if p.shape != g.shape:
            raise ShapeError(f"adam_step: {n} has shape {p.shape} but gradient {g.shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"adam_step: non-finite gradient for {n}")
    m = state.m or [np.zeros_like(p) for p in params]
    v = state.v or [np.zeros_like(p) for p in params]
    for p, mi, n in zip(params, m, names):
        if mi.shape != p.shape:
            raise ShapeError(f"adam_step: optimizer state for {n} has shape {mi.shape}, param {p.shape}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi = b1 * mi + (1.0 - b1) * g
        vi = b2 * vi + (1.0 - b2) * g * g
        new_p.append(p - state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps))
        new_m.append(mi)
        new_v.append(vi)
    new_state = AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
    return new_p, new_state


class Adam:
    """In-place Adam over a list of leaf tensors, reading ``tensor.grad``."""

    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps)

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        names = [p.name or f"param[{i}]" for i, p in enumerate(self.params)]
        new, self.state = adam_step([p.data for p in self.params], grads, self.state, names)
        for p, d in zip(self.params, new):
            p.data = d
            p.grad = None
