"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the pieces the VAE needs: dense, 1-D convolution, 1-D max-pooling,
1-D upscale, batch normalization, elementwise activations, and a handful of
broadcasting arithmetic ops used to assemble the lower bound.

Every op takes an optional ``tape``. With ``tape=None`` nothing is recorded
and the call is a pure forward evaluation.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.99

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class Tensor:
    """A float64 array, optionally participating in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf tensor with a persistent, accumulating ``grad``."""

    __slots__ = ("name", "id")

    def __init__(self, value, name=""):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.name = name
        self.id = next(_ids)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable


@dataclass
class Tape:
    """Ordered record of ops; ``backward`` walks it in reverse once."""

    nodes: list = field(default_factory=list)

    def record(self, out, inputs, backward):
        self.nodes.append(_Node(out, tuple(inputs), backward))

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into every grad-requiring leaf's ``grad``."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(n.out) for n in self.nodes}
        if id(loss) not in produced:
            raise ValueError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if id(inp) in produced:
                    key = id(inp)
                    grads[key] = grads[key] + gi if key in grads else gi
                elif inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64)
                else:
                    inp.grad = inp.grad + gi


def backprop(tape: Tape, loss: Tensor):
    tape.backward(loss)


def _emit(tape, data, inputs, backward):
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if tape is not None and req:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise / reduction ops
# --------------------------------------------------------------------------

def add(a, b, tape=None):
    a, b = as_tensor(a), as_tensor(b)
    return _emit(tape, a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b, tape=None):
    a, b = as_tensor(a), as_tensor(b)
    return _emit(tape, a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b, tape=None):
    a, b = as_tensor(a), as_tensor(b)
    return _emit(tape, a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float, tape=None):
    a = as_tensor(a)
    return _emit(tape, a.data * c, (a,), lambda g: (g * c,))


def exp(a, tape=None):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _emit(tape, y, (a,), lambda g: (g * y,))


def square(a, tape=None):
    a = as_tensor(a)
    return _emit(tape, a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sum(a, axis=None, tape=None):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    y = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % a.data.ndim for ax in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _emit(tape, y, (a,), back)


def mean(a, axis=None, tape=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum(a, axis=axis, tape=tape), 1.0 / n, tape=tape)


def reshape(a, shape, tape=None):
    a = as_tensor(a)
    return _emit(tape, a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def split_last(a, sizes: Sequence[int], tape=None):
    """Split along the last axis into consecutive chunks of ``sizes``."""
    a = as_tensor(a)
    if np.sum(sizes) != a.shape[-1]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover last axis {a.shape[-1]}")
    outs, start = [], 0
    for n in sizes:
        sl = slice(start, start + n)

        def back(g, sl=sl):
            full = np.zeros_like(a.data)
            full[..., sl] = g
            return (full,)

        outs.append(_emit(tape, a.data[..., sl].copy(), (a,), back))
        start += n
    return outs


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

def dense_apply(x, weights: Tensor, bias: Tensor, tape=None):
    x = as_tensor(x)
    if x.data.ndim != 2 or weights.data.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"dense: input {x.shape} incompatible with weights {weights.shape}"
            " (need [batch, in_units] @ [in_units, out_units])")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} != ({weights.shape[1]},)")
    y = x.data @ weights.data + bias.data

    def back(g):
        return g @ weights.data.T, x.data.T @ g, g.sum(axis=0)

    return _emit(tape, y, (x, weights, bias), back)


def conv1d_apply(x, kernels_: Tensor, bias: Tensor, tape=None):
    """Same-length cross-correlation with symmetric zero padding."""
    x = as_tensor(x)
    if x.data.ndim != 3 or kernels_.data.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-D input and kernels, got {x.shape}, {kernels_.shape}")
    co, ci, k = kernels_.shape
    if k % 2 == 0:
        raise ShapeError(f"conv1d: filter size must be odd, got {k}")
    if x.shape[1] != ci:
        raise ShapeError(f"conv1d: input has {x.shape[1]} channels, kernels expect {ci}")
    if x.shape[2] < k:
        raise ShapeError(f"conv1d: length {x.shape[2]} shorter than filter {k}")
    if bias.shape != (co,):
        raise ShapeError(f"conv1d: bias {bias.shape} != ({co},)")
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(kernels_.data)
    y = kernels.conv1d_forward(xd, wd, bias.data)

    def back(g):
        return kernels.conv1d_backward(xd, wd, np.ascontiguousarray(g))

    return _emit(tape, y, (x, kernels_, bias), back)


def maxpool1d_apply(x, pool_size: int, tape=None):
    x = as_tensor(x)
    if pool_size < 1:
        raise ShapeError(f"maxpool1d: pool size must be positive, got {pool_size}")
    if x.data.ndim != 3 or x.shape[2] % pool_size:
        raise ShapeError(f"maxpool1d: length of {x.shape} not divisible by pool size {pool_size}")
    y, idx = kernels.maxpool1d_forward(np.ascontiguousarray(x.data), pool_size)
    return _emit(tape, y, (x,),
                 lambda g: (kernels.maxpool1d_backward(np.ascontiguousarray(g), idx, pool_size),))


def upscale1d_apply(x, factor: int, tape=None):
    x = as_tensor(x)
    if factor < 1:
        raise ShapeError(f"upscale1d: factor must be >= 1, got {factor}")
    y = np.repeat(x.data, factor, axis=-1)
    B, C, L = x.shape

    def back(g):
        return (g.reshape(B, C, L, factor).sum(axis=3),)

    return _emit(tape, y, (x,), back)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM
    # None -> exponential moving average; int -> cumulative average over that many batches
    count: int | None = None

    @classmethod
    def fresh(cls, n):
        return cls(np.zeros(n), np.ones(n))

    def update(self, batch_mean, batch_var):
        if self.count is None:
            m = self.momentum
            self.mean = m * self.mean + (1.0 - m) * batch_mean
            self.var = m * self.var + (1.0 - m) * batch_var
        else:
            self.count += 1
            w = 1.0 / self.count
            self.mean = self.mean + w * (batch_mean - self.mean)
            self.var = self.var + w * (batch_var - self.var)


def batchnorm_apply(x, gamma: Tensor, beta: Tensor, state: BatchNormState, mode="infer",
                    tape=None, update_stats=True):
    """Normalize each feature (axis 1); 3-D inputs pool statistics over length too."""
    x = as_tensor(x)
    if x.data.ndim not in (2, 3):
        raise ShapeError(f"batchnorm: expected 2-D or 3-D input, got {x.shape}")
    n_feat = x.shape[1]
    if gamma.shape != (n_feat,) or beta.shape != (n_feat,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({n_feat},)")
    axes = (0,) if x.data.ndim == 2 else (0, 2)
    bshape = (1, n_feat) if x.data.ndim == 2 else (1, n_feat, 1)
    gb = gamma.data.reshape(bshape)
    bb = beta.data.reshape(bshape)

    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError("batchnorm: train mode needs a batch of at least 2")
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        if update_stats:
            state.update(mu, var)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xc * inv.reshape(bshape)
        y = gb * xhat + bb
        n = x.data.size // n_feat

        def back(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            gx = g * gb
            dx = (inv.reshape(bshape) / n) * (
                n * gx - gx.sum(axis=axes).reshape(bshape)
                - xhat * (gx * xhat).sum(axis=axes).reshape(bshape))
            return dx, dgamma, dbeta
    elif mode == "infer":
        inv = 1.0 / np.sqrt(state.var + BN_EPS)
        xhat = (x.data - state.mean.reshape(bshape)) * inv.reshape(bshape)
        y = gb * xhat + bb

        def back(g):
            return g * gb * inv.reshape(bshape), (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        raise ValueError(f"batchnorm: mode must be 'train' or 'infer', got {mode!r}")

    return _emit(tape, y, (x, gamma, beta), back)


def activation_apply(x, kind="relu", tape=None):
    x = as_tensor(x)
    if kind == "relu":
        mask = x.data > 0
        return _emit(tape, np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))
    if kind == "tanh":
        y = np.tanh(x.data)
        return _emit(tape, y, (x,), lambda g: (g * (1.0 - y * y),))
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

class NonFiniteLoss(FloatingPointError):
    pass


def finite_diff_check(build: Callable[[Tape], Tensor], params: Sequence[Tensor], h=1e-5):
    """Max relative error between taped gradients and central differences.

    ``build(tape)`` must construct the scalar loss from ``params`` (whose
    ``.data`` arrays are perturbed in place). Relative error per entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``; a graph with no parameters returns 0.

    Entries where ``|a - n|`` is below the resolution of the difference
    quotient itself (8 ulps of the loss over ``h``) count as exact: an
    analytically zero gradient cannot be told apart from roundoff there.
    """
    params = list(params)
    if not params or all(p.data.size == 0 for p in params):
        return 0.0
    for p in params:
        p.grad = np.zeros_like(p.data) if isinstance(p, Parameter) else None
    tape = Tape()
    loss = build(tape)
    if not np.isfinite(loss.data).all():
        raise NonFiniteLoss("loss is not finite at the base point")
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else np.asarray(p.grad)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(build(None).data)
            flat[i] = orig - h
            fm = float(build(None).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteLoss(f"loss not finite when perturbing {getattr(p, 'name', '')}[{i}]")
            num = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            resolution = 8.0 * np.spacing(max(abs(fp), abs(fm))) / h
            if abs(a - num) <= resolution:
                continue
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
