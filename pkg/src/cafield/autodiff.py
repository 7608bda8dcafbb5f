"""Minimal dense-tensor engine with reverse-mode differentiation.

Values are float64 numpy arrays. Every op records a closure that maps the
output adjoint to input adjoints; :meth:`Tensor.backward` walks the graph in
reverse topological order and accumulates into ``.grad``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = "cafield-ckpt-v1"


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class UsageError(RuntimeError):
    pass


def _unbroadcast(grad, shape):
    # sum out axes that numpy broadcasting added or stretched
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # -- graph construction -----------------------------------------------
    @staticmethod
    def _node(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward() needs a scalar loss")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        adj = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in adj:
                    adj[id(p)] = adj[id(p)] + pg
                else:
                    adj[id(p)] = pg

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

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

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None):
        return reduce_max(self, axis)[0]


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# -- elementwise --------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return Tensor._node(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return Tensor._node(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return Tensor._node(a.data * b.data, (a, b),
                        lambda g: (_unbroadcast(g * b.data, a.shape),
                                   _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data / b.data
    return Tensor._node(out, (a, b),
                        lambda g: (_unbroadcast(g / b.data, a.shape),
                                   _unbroadcast(-g * out / b.data, b.shape)))


def scale(a, c):
    c = float(c)
    return Tensor._node(a.data * c, (a,), lambda g: (g * c,))


def relu(a):
    mask = a.data > 0  # subgradient 0 at exactly 0
    return Tensor._node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a):
    out = np.exp(a.data)
    return Tensor._node(out, (a,), lambda g: (g * out,))


def sqrt(a):
    out = np.sqrt(a.data)
    return Tensor._node(out, (a,), lambda g: (g * 0.5 / out,))


def elementwise(kind, a, b=None):
    """Dispatch by name: add, sub, mul, div, scale, relu, exp, sqrt."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"relu": relu, "exp": exp, "sqrt": sqrt}
    if kind in binary:
        return binary[kind](a, b)
    if kind == "scale":
        return scale(as_tensor(a), b)
    if kind in unary:
        return unary[kind](as_tensor(a))
    raise ValueError(f"unknown elementwise op {kind!r}")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    vec = b.ndim == 1
    bd = b.data[:, None] if vec else b.data
    out = np.matmul(a.data, bd)

    def backward(g):
        g2 = g[..., None] if vec else g
        ga = np.matmul(g2, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2) if a.ndim > 1 else a.data[:, None], g2)
        gb = _unbroadcast(gb, bd.shape)
        return _unbroadcast(ga, a.shape), (gb[:, 0] if vec else gb)

    return Tensor._node(out[..., 0] if vec else out, (a, b), backward)


def einsum(subscripts, a, b):
    """Two-operand einsum. Every index of an operand must appear in the other
    operand or in the output (no operand-private summation)."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_s = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if any(ch not in other and ch not in out_s for ch in s):
            raise DimensionError(f"unsupported einsum pattern {subscripts}")
    try:
        out = np.einsum(subscripts, a.data, b.data, optimize=True)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def backward(g):
        ga = np.einsum(f"{out_s},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_s},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return Tensor._node(out, (a, b), backward)


# -- shape ops ----------------------------------------------------------------

def reshape(a, shape):
    old = a.shape
    return Tensor._node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a, index):
    """Basic or advanced indexing; backward scatters with np.add.at."""
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._node(np.array(out, dtype=np.float64), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                        lambda g: tuple(np.split(g, splits, axis=axis)))


# -- reductions ---------------------------------------------------------------

def _check_axis(a, axis):
    axes = range(a.ndim) if axis is None else ([axis] if np.isscalar(axis) else axis)
    for ax in axes:
        if a.shape[ax] == 0:
            raise ValueError("reduction over an empty axis")


def reduce_sum(a, axis=None, keepdims=False):
    _check_axis(a, axis)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    _check_axis(a, axis)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    s = reduce_sum(a, axis, keepdims)
    n = float(n)
    return Tensor._node(s.data / n, (s,), lambda g: (g / n,))   # divide like np.mean


def reduce_max(a, axis=None):
    """Max along one axis (or all); returns (values, argmax). Ties go to the
    lowest index, which is numpy's argmax rule."""
    _check_axis(a, axis)
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))

        def backward_all(g):
            full = np.zeros(flat.shape)
            full[idx] = g
            return (full.reshape(a.shape),)

        return Tensor._node(np.array(flat[idx]), (a,), backward_all), idx
    idx = np.argmax(a.data, axis=axis)
    vals = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor._node(np.squeeze(vals, axis=axis), (a,), backward), idx


def reduce(kind, a, axis=None):
    if kind == "sum":
        return reduce_sum(a, axis)
    if kind == "mean":
        return reduce_mean(a, axis)
    if kind == "max":
        return reduce_max(a, axis)
    raise ValueError(f"unknown reduction {kind!r}")


# -- batch norm ---------------------------------------------------------------

class BatchNorm:
    """Per-channel batch norm over every axis but the last.

    ``running <- momentum * running + (1 - momentum) * batch`` with
    momentum 0.75.
    """

    def __init__(self, channels, momentum=0.75, eps=1e-5, affine=True):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.gamma = parameter(np.ones(channels)) if affine else None
        self.beta = parameter(np.zeros(channels)) if affine else None

    def parameters(self):
        return [] if self.gamma is None else [self.gamma, self.beta]

    def __call__(self, x, training):
        return batch_norm(x, self, training)


def batch_norm(x, state, training):
    if x.shape[-1] != state.channels:
        raise DimensionError(f"expected {state.channels} channels, got {x.shape[-1]}")
    if x.data.size == 0:
        raise ValueError("batch norm on an empty batch")
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = reduce_mean(x, axes, keepdims=True)
        xc = x - mu
        var = reduce_mean(xc * xc, axes, keepdims=True)
        y = xc / sqrt(var + state.eps)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mu.data.reshape(-1)
        state.running_var = m * state.running_var + (1 - m) * var.data.reshape(-1)
    else:
        y = (x - state.running_mean) * (1.0 / np.sqrt(state.running_var + state.eps))
    if state.gamma is not None:
        y = y * state.gamma + state.beta
    return y


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 6e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Adam with a decoupled L2 term (``p -= lr * wd * p``)."""

    def __init__(self, params, lr=6e-4, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, weight_decay=weight_decay, beta1=betas[0],
                               beta2=betas[1], eps=eps,
                               m=[np.zeros_like(p.data) for p in self.params],
                               v=[np.zeros_like(p.data) for p in self.params])

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self):
        adam_step(self.params, self.state)


def adam_step(params, state):
    for p in params:
        if p.grad is None:
            raise UsageError(f"parameter {p.name or p.shape} has no gradient")
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= state.lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * p.data)
        p.grad = np.zeros_like(p.data)


# -- gradient checking --------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_err: float
    per_input: list
    passed: bool


def gradcheck(f, inputs, tol=1e-5, step=1e-5, atol=1e-8, max_entries=None, seed=0, stencil=2):
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` against central
    differences. The error for each input is ``max|a - n| / max(|a|, |n|)``
    over the checked entries; it is 0 when both gradients are below the
    larger of ``atol`` and the roundoff level ``100 eps |f| / step`` (a
    vanishing gradient measured through roundoff). ``max_entries`` checks a
    seeded subset of each input's entries. ``stencil=4`` uses the fourth-order
    five-point difference for strongly curved graphs."""
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    out.backward()
    floor = max(atol, 100 * np.finfo(np.float64).eps * max(abs(out.item()), 1.0) / step)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)
    errs = []
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, max_entries, replace=False))
        num = np.zeros(entries.size)
        for n, i in enumerate(entries):
            orig = flat[i]
            vals = {}
            for k in ((-2, -1, 1, 2) if stencil == 4 else (-1, 1)):
                flat[i] = orig + k * step
                vals[k] = f(*inputs).item()
            flat[i] = orig
            if stencil == 4:
                num[n] = (8 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12 * step)
            else:
                num[n] = (vals[1] - vals[-1]) / (2 * step)
        ana = a.reshape(-1)[entries]
        denom = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0))
        errs.append(0.0 if denom <= floor else float(np.abs(ana - num).max() / denom))
    worst = max(errs, default=0.0)
    return GradcheckReport(worst, errs, worst < tol)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, arrays, meta=None):
    """Write ``manifest.txt`` and ``blob.bin`` under directory ``path``.

    The blob is the concatenation of every array as little-endian float64 in
    manifest order; the manifest records name, shape, byte offset and count.
    """
    os.makedirs(path, exist_ok=True)
    lines = [f"format = {CHECKPOINT_VERSION}", "blob = blob.bin"]
    for k, v in sorted((meta or {}).items()):
        lines.append(f"meta.{k} = {v}")
    offset = 0
    chunks = []
    for name in sorted(arrays):
        arr = np.array(arrays[name], dtype="<f8", order="C")
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"param {name} {shape} {offset} {arr.size}")
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    with open(os.path.join(path, "blob.bin"), "wb") as fh:
        fh.write(b"".join(chunks))
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    with open(os.path.join(path, "manifest.txt")) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = dict(ln.split(" = ", 1) for ln in lines if " = " in ln)
    if header.get("format") != CHECKPOINT_VERSION:
        raise ValueError(f"not a {CHECKPOINT_VERSION} checkpoint: {path}")
    with open(os.path.join(path, header["blob"]), "rb") as fh:
        blob = fh.read()
    arrays = {}
    for ln in lines:
        if not ln.startswith("param "):
            continue
        _, name, shape, offset, count = ln.split()
        shape = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        offset, count = int(offset), int(count)
        if offset + 8 * count > len(blob):
            raise ValueError(f"checkpoint blob truncated at {name}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
    meta = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
    return arrays, meta
