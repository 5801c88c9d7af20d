"""Reverse-mode differentiation over numpy arrays.

Operations executed inside an active :class:`Tape` are recorded in creation
order together with a closure that maps the output gradient onto the inputs.
Creation order is a valid topological order, so :meth:`Tape.backward` is a
single reverse sweep. Outside a tape the same functions just compute values.
"""
from __future__ import annotations

import threading

import numpy as np
from scipy.special import expit

from .. import signal as sig
from ..errors import NumericalError

_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "__weakref__")

    # Make numpy defer to our operators for ``ndarray * Tensor``.
    __array_priority__ = 1000

    def __init__(self, value, parents=(), backward_fn=None, op="const"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def requires_grad(self) -> bool:
        return self.backward_fn is not None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

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
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Parameter(Tensor):
    """A named leaf whose gradient is accumulated by :meth:`Tape.backward`."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(np.array(value, dtype=np.float64, copy=True), op=f"param:{name}")
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.value)

    @property
    def requires_grad(self) -> bool:
        return self.trainable

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Tape:
    """Records differentiable operations for one forward/backward pass.

    >>> p = Parameter("p", [1.0, 2.0])
    >>> with Tape() as tape:
    ...     loss = (p * p).sum()
    >>> tape.backward(loss)
    >>> p.grad.tolist()
    [2.0, 4.0]
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._previous = None
        self._done = False

    def __enter__(self):
        self._previous = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._previous
        return False

    def record(self, node: Tensor):
        self.nodes.append(node)

    def backward(self, loss: Tensor):
        if not self.nodes or not any(node is loss for node in self.nodes[::-1]):
            raise RuntimeError("backward called without a recorded forward pass for this loss")
        if self._done:
            raise RuntimeError("tape already consumed by a previous backward pass")
        if loss.value.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if isinstance(parent, Parameter):
                    parent.grad = parent.grad + pg
                else:
                    key = id(parent)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
        self._done = True


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, backward_fn, op) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite value produced by operation '{op}'")
    tape = _active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(value, op=op)
    out = Tensor(value, parents, backward_fn, op)
    tape.record(out)
    return out


def check_finite(x: Tensor, what: str = "input") -> Tensor:
    if not np.all(np.isfinite(x.value)):
        raise NumericalError(f"non-finite value in {what}")
    return x


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * out / b.value, b.shape)), "div")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.value ** 2, (x,), lambda g: (2.0 * g * x.value,), "square")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.value)
    return _make(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def log10(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log10(x.value)
    return _make(out, (x,), lambda g: (g / (x.value * np.log(10.0)),), "log10")


def clamp_min(x, floor: float) -> Tensor:
    x = as_tensor(x)
    keep = x.value >= floor
    return _make(np.where(keep, x.value, floor), (x,), lambda g: (g * keep,), "clamp_min")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.value > 0
    return _make(x.value * pos, (x,), lambda g: (g * pos,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.value)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def prelu(x, alpha) -> Tensor:
    """Parametric ReLU; ``alpha`` broadcasts against ``x``."""
    x, alpha = as_tensor(x), as_tensor(alpha)
    pos = x.value > 0
    out = np.where(pos, x.value, alpha.value * x.value)
    return _make(out, (x, alpha),
                 lambda g: (g * np.where(pos, 1.0, alpha.value),
                            _unbroadcast(g * np.where(pos, 0.0, x.value), alpha.shape)),
                 "prelu")


# Reductions and shape manipulation

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / count)


def dot(a, b, axis=-1) -> Tensor:
    return tsum(mul(a, b), axis=axis)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return _make(np.transpose(x.value, axes), (x,),
                 lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        out = np.zeros_like(x.value)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(x.value[index], (x,), backward, "getitem")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return _make(np.stack([t.value for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


def pad_last(x, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    x = as_tensor(x)
    widths = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    n = x.shape[-1]
    return _make(np.pad(x.value, widths), (x,), lambda g: (g[..., left:left + n],), "pad")


# Convolutions

def conv1d(x, w, stride: int = 1, dilation: int = 1, groups: int = 1) -> Tensor:
    """``x [B, Cin, T]``, ``w [Cout, Cin/groups, K]`` -> ``[B, Cout, T_out]``."""
    x, w = as_tensor(x), as_tensor(w)
    out = sig.conv1d_batched(x.value, w.value, stride, dilation, groups)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gx = sig.conv1d_batched_grad_input(g, w.value, x.shape[-1], stride, dilation, groups)
        if w.requires_grad:
            gw = sig.conv1d_batched_grad_weight(g, x.value, w.shape[-1], stride, dilation, groups)
        return gx, gw

    return _make(out, (x, w), backward, "conv1d")


def conv2d(x, kernels, stride=(1, 1), dilation=(1, 1)) -> Tensor:
    """``x [B, H, W]``, ``kernels [N, h, L]`` -> ``[B, N, H_out, W_out]``."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    sh, sw = stride
    dh, dw = dilation
    out = sig.conv2d_batched(x.value, kernels.value, sh, sw, dh, dw)

    def backward(g):
        gx = gk = None
        if x.requires_grad:
            gx = sig.conv2d_batched_grad_input(g, kernels.value, x.shape, sh, sw, dh, dw)
        if kernels.requires_grad:
            gk = sig.conv2d_batched_grad_kernels(g, x.value, kernels.shape, sh, sw, dh, dw)
        return gx, gk

    return _make(out, (x, kernels), backward, "conv2d")


def transposed_conv1d(x, basis, hop: int) -> Tensor:
    """Overlap-add synthesis: ``x [B, N, F]``, ``basis [N, L]`` -> ``[B, (F-1)*hop + L]``."""
    x, basis = as_tensor(x), as_tensor(basis)
    frames = np.matmul(x.value.transpose(0, 2, 1), basis.value)
    n_frames, length = frames.shape[1:]
    out = sig.overlap_add(frames, hop)

    def backward(g):
        # Adjoint of overlap-add is framing.
        gframes = sig.frame_signal(g, length, hop)[:, :n_frames]
        gx = np.matmul(basis.value, gframes.transpose(0, 2, 1))
        gb = np.matmul(x.value, gframes).sum(axis=0)
        return gx, gb

    return _make(out, (x, basis), backward, "transposed_conv1d")


# Normalization

class BatchNormState:
    """Running statistics for :func:`batch_norm` (momentum-weighted)."""

    def __init__(self, num_features: int, momentum: float = 0.9):
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.momentum = momentum


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool, eps: float = 1e-5) -> Tensor:
    """Per-feature normalization of ``x [B, C, T]`` over batch and time."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    v = x.value
    if training:
        mu = v.mean(axis=(0, 2))
        var = v.var(axis=(0, 2))
        m = state.momentum
        state.running_mean = m * state.running_mean + (1.0 - m) * mu
        state.running_var = m * state.running_var + (1.0 - m) * var
    else:
        mu, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu[None, :, None]) * inv_std[None, :, None]
    out = gamma.value[None, :, None] * xhat + beta.value[None, :, None]
    count = v.shape[0] * v.shape[2]

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2))
        gb = g.sum(axis=(0, 2))
        gxhat = g * gamma.value[None, :, None]
        if training:
            gx = (inv_std[None, :, None] / count) * (
                count * gxhat
                - gxhat.sum(axis=(0, 2))[None, :, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2))[None, :, None])
        else:
            gx = gxhat * inv_std[None, :, None]
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward, "batch_norm")


def forward(fn, *args, **kwargs):
    """Run ``fn`` under a fresh tape; returns ``(output, tape)``."""
    with Tape() as tape:
        out = fn(*args, **kwargs)
    return out, tape


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


sum = tsum  # noqa: A001  (exposed as ops.sum)
