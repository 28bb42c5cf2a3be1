"""Minimal dense-tensor arithmetic with reverse-mode autodiff.

Every tensor carries float64 data; gradients accumulate additively and the
caller clears them explicitly. The backward pass walks nodes in exact
reverse creation order, which makes repeated passes bit-reproducible.
"""

import itertools

import numpy as np
from scipy.special import erf, expit

_ROOT2 = np.sqrt(2.0)
_INV_ROOT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_creation_counter = itertools.count()


class ContractError(ValueError):
    """A caller violated an operation precondition."""


class Tensor:
    """A float64 ndarray plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "_order")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()
        self._order = next(_creation_counter)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data, parents, bwd):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bwd
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Reduce a gradient back to the shape of a trailing-aligned operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _result(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return _result(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _result(a.data * b.data, (a, b), bwd)


def neg(a):
    def bwd(g):
        if a.requires_grad:
            a.accumulate(-g)

    return _result(-a.data, (a,), bwd)


def scale(a, s):
    """Multiply by a python scalar."""
    s = float(s)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * s)

    return _result(a.data * s, (a,), bwd)


def shift(a, s):
    """Add a python scalar."""
    s = float(s)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g)

    return _result(a.data + s, (a,), bwd)


def matmul(a, b):
    """Matrix product over the trailing two axes; leading axes must match."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractError("matmul requires rank >= 2 operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ContractError(
            f"matmul inner extents differ: {a.data.shape} x {b.data.shape}"
        )
    if a.data.shape[:-2] != b.data.shape[:-2] and a.data.ndim > 2 and b.data.ndim > 2:
        raise ContractError("matmul leading extents differ (no broadcasting)")

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            if ga.shape != a.data.shape:  # a was rank-2 against a batched b
                ga = ga.sum(axis=tuple(range(ga.ndim - a.data.ndim)))
            a.accumulate(ga)
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if gb.shape != b.data.shape:
                gb = gb.sum(axis=tuple(range(gb.ndim - b.data.ndim)))
            b.accumulate(gb)

    return _result(a.data @ b.data, (a, b), bwd)


def softmax_lastdim(a):
    """Softmax over the last axis, max-shifted for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(y * (g - np.sum(g * y, axis=-1, keepdims=True)))

    return _result(y, (a,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    n = x.data.shape[-1]

    def bwd(g):
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
            gain.accumulate(gg)
        if bias.requires_grad:
            bias.accumulate(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gt = g * gain.data
            m1 = gt.mean(axis=-1, keepdims=True)
            m2 = (gt * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(inv * (gt - m1 - xhat * m2))

    return _result(xhat * gain.data + bias.data, (x, gain, bias), bwd)


def gelu(a):
    """Exact GELU, x * Phi(x)."""
    phi = 0.5 * (1.0 + erf(a.data / _ROOT2))
    y = a.data * phi

    def bwd(g):
        if a.requires_grad:
            pdf = _INV_ROOT2PI * np.exp(-0.5 * a.data * a.data)
            a.accumulate(g * (phi + a.data * pdf))

    return _result(y, (a,), bwd)


def sigmoid(a):
    y = expit(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * y * (1.0 - y))

    return _result(y, (a,), bwd)


def softplus(a):
    """log(1 + exp(x)), overflow-safe."""
    y = np.logaddexp(0.0, a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * expit(a.data))

    return _result(y, (a,), bwd)


def log(a):
    def bwd(g):
        if a.requires_grad:
            a.accumulate(g / a.data)

    return _result(np.log(a.data), (a,), bwd)


def absolute(a):
    """|x| with subgradient 0 at the kink."""

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * np.sign(a.data))

    return _result(np.abs(a.data), (a,), bwd)


def reshape(a, shape):
    shape = tuple(shape)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.data.shape))

    return _result(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(np.ascontiguousarray(g.transpose(inverse)))

    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def tsum(a):
    """Sum of all elements, as a scalar tensor."""

    def bwd(g):
        if a.requires_grad:
            a.accumulate(np.full_like(a.data, float(g)))

    return _result(a.data.sum(), (a,), bwd)


def tmean(a):
    n = a.data.size

    def bwd(g):
        if a.requires_grad:
            a.accumulate(np.full_like(a.data, float(g) / n))

    return _result(a.data.mean(), (a,), bwd)


def gather(a, indices):
    """Select elements of a flat tensor by index; scatter-add on backward."""
    if a.data.ndim != 1:
        raise ContractError("gather expects a rank-1 tensor")
    idx = np.asarray(indices, dtype=np.intp)

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a.accumulate(acc)

    return _result(a.data[idx], (a,), bwd)


def backward(loss):
    """Propagate d(loss)/d(node) to every reachable requires_grad tensor."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda t: t._order, reverse=True)

    loss.accumulate(np.ones_like(loss.data))
    for node in nodes:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(f, params, step=1e-4, samples_per_tensor=None, seed=0):
    """Worst relative error of backward() vs central finite differences.

    ``f()`` must rebuild the scalar loss from ``params`` on every call.
    ``samples_per_tensor`` limits the check to that many random elements per
    parameter (None checks every element). Returns 0.0 for empty params.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    params = list(params)
    if not params:
        return 0.0

    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        if samples_per_tensor is None or samples_per_tensor >= flat.size:
            elements = range(flat.size)
        else:
            elements = rng.choice(flat.size, size=samples_per_tensor, replace=False)
        for i in elements:
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().data)
            flat[i] = orig - step
            down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            got = 0.0 if a is None else float(a.reshape(-1)[i])
            err = abs(got - numeric) / max(abs(got), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
