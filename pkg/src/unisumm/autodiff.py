"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` records a node
holding its inputs and a closure mapping the output gradient to input
gradients. Node ids increase monotonically, so sorting the reachable nodes by
id (descending) gives a valid reverse topological order. ``backward`` visits
each node once and then frees the tape.
"""

from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np

from .errors import ContractError, DimensionError, StateError

_node_ids = itertools.count()
_grad_enabled = True

DTYPE = np.float64


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus optional gradient bookkeeping.

    ``data`` is a C-contiguous numpy array; ``shape`` mirrors it. Leaves are
    tensors created directly by the user; interior nodes carry ``_parents``
    and a ``_backward`` closure until the tape is freed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "_freed", "op")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._id = next(_node_ids)
        self._freed = False
        self.op = None

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

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def numpy(self):
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NotImplementedError("tensor / tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _scalar_error(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _make(data, parents, backward_fn, op):
    """Wrap an op result, recording a tape node when any parent needs grad."""
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
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


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    """Elementwise product; ``b`` may be a python scalar."""
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "scale")
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def square(a):
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh-approximated GELU (smooth, so finite differences behave)."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw, "gelu")


def dropout(a, rate, rng):
    """Inverted dropout; identity when ``rate`` is 0 or ``rng`` is None."""
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- reductions


def tsum(a, axis=None):
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (a,), bw, "sum")


def mean(a, axis=None):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / float(n))


# ---------------------------------------------------------------- shape ops


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
        "transpose",
    )


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def broadcast_to(a, shape):
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {old} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, old),), "broadcast")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw, "concat")


def take(a, index):
    """Basic/advanced indexing with scatter-add backward."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index], dtype=DTYPE), (a,), bw, "index")


def embedding(weight, ids):
    """Row gather ``weight[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")
    shape = weight.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(weight.data[ids], (weight,), bw, "embedding")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # shared weight: fold the batch axes into one GEMM
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _make(out, (a, b), bw, "matmul")


def softmax_rows(x):
    """Softmax over the last axis with per-row max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax_array(x):
    """Plain-array log-softmax over the last axis (no tape)."""
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(xd.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def cross_entropy(logits, targets, ignore_index=None):
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` has shape [..., V] and ``targets`` the matching leading shape.
    Positions whose target equals ``ignore_index`` are excluded from the mean.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {logits.shape} do not match targets {targets.shape}")
    vocab = logits.shape[-1]
    flat_t = targets.reshape(-1)
    keep = np.ones(flat_t.shape, dtype=bool) if ignore_index is None else flat_t != ignore_index
    if not keep.any():
        raise ContractError("cross_entropy needs at least one non-padding position")
    live = flat_t[keep]
    if live.min() < 0 or live.max() >= vocab:
        bad = live[(live < 0) | (live >= vocab)][0]
        raise IndexError(f"target id {int(bad)} outside [0, {vocab})")
    flat = logits.data.reshape(-1, vocab)
    logp = log_softmax_array(flat)
    rows = np.nonzero(keep)[0]
    count = float(rows.size)
    loss = -logp[rows, flat_t[rows]].sum() / count
    lshape = logits.shape

    def bw(g):
        grad = np.zeros_like(flat)
        probs = np.exp(logp[rows])
        probs[np.arange(rows.size), flat_t[rows]] -= 1.0
        grad[rows] = probs * (float(np.asarray(g).reshape(-1)[0]) / count)
        return (grad.reshape(lshape),)

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- backward


def backward(loss):
    """Populate ``grad`` on every leaf reachable from scalar ``loss``.

    Raises:
        ContractError: ``loss`` is not a single-element tensor.
        StateError: the tape was already consumed, or a leaf still holds a
            gradient from an earlier pass (call ``zero_grad`` first).
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise StateError("backward already ran on this graph; recompute the forward pass")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    nodes, leaves, seen, stack = [], [], set(), [loss]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen.add(t._id)
        if t._parents:
            nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
        elif t.requires_grad:
            leaves.append(t)
    stale = [leaf for leaf in leaves if leaf.grad is not None]
    if stale:
        raise StateError(f"{len(stale)} leaf tensor(s) already hold gradients; zero them first")

    nodes.sort(key=lambda t: t._id, reverse=True)
    grads = {loss._id: np.ones(loss.shape, dtype=DTYPE)}
    for node in nodes:
        g = grads.pop(node._id, None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._parents:
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg
            else:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
        node._parents = ()
        node._backward = None
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros(leaf.shape, dtype=DTYPE)
    loss._freed = True


def grad_check(f, x, eps=1e-4):
    """Compare ``backward`` against central differences.

    Args:
        f: Callable mapping a Tensor of ``x``'s shape to a scalar Tensor.
        x: Point of evaluation (Tensor or array).
        eps: Finite-difference step.

    Returns:
        max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out)
    analytic = leaf.grad.reshape(-1)

    numeric = np.empty_like(analytic)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(base)).item()
            flat[i] = orig - eps
            fm = f(Tensor(base)).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
