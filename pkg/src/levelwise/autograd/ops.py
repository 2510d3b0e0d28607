"""Differentiable primitives over :class:`~levelwise.autograd.tensor.Tensor`.

Every operation computes its forward result (delegating the hot kernels to
the active backend in :mod:`levelwise.kernels`), and, when a tape is
active and some input requires gradients, records a closure that pulls the
output gradient and accumulates into the inputs.

Broadcasting is limited by design to bias-vector addition along the last
axis (``add_bias``) plus the two special-purpose attention helpers; all
other shape plumbing goes through explicit ``reshape``/``transpose``.
"""

import numpy as np

from .. import kernels as K
from .tensor import Tensor, active_tape, as_tensor

BCE_EPS = 1e-7


def _shape_error(op, *shapes):
    return ValueError(f"{op}: incompatible shapes {' and '.join(map(str, shapes))}")


def _record(out, fn):
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, fn)


def matmul(a, b):
    """Matrix product; equal leading batch dimensions, or plain 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise _shape_error("matmul", a.shape, b.shape)
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(g @ np.swapaxes(b.data, -1, -2), own=True)
        if b.requires_grad:
            b.accumulate_grad(np.swapaxes(a.data, -1, -2) @ g, own=True)

    _record(out, backward)
    return out


def linear(x, weight, bias):
    """Affine map ``x @ weight.T + bias`` for 2-D ``x``.

    ``weight`` has shape (outputs, inputs), matching classifier-head
    parameter layout; ``bias`` has shape (outputs,).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise _shape_error("linear", x.shape, weight.shape)
    if bias.shape != (weight.shape[0],):
        raise _shape_error("linear", weight.shape, bias.shape)
    out_data = x.data @ weight.data.T + bias.data
    req = x.requires_grad or weight.requires_grad or bias.requires_grad
    out = Tensor(out_data, requires_grad=req)

    def backward():
        g = out.grad
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data, own=True)
        if weight.requires_grad:
            weight.accumulate_grad(g.T @ x.data, own=True)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0), own=True)

    _record(out, backward)
    return out


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("add", a.shape, b.shape)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    _record(out, backward)
    return out


def add_bias(x, bias):
    """Add a vector along the last axis (the one permitted broadcast)."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise _shape_error("add_bias", x.shape, bias.shape)
    out = Tensor(x.data + bias.data, requires_grad=x.requires_grad or bias.requires_grad)

    def backward():
        g = out.grad
        if x.requires_grad:
            x.accumulate_grad(g)
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, bias.shape[0]).sum(axis=0), own=True)

    _record(out, backward)
    return out


def scale(x, factor):
    """Multiply by a python scalar constant."""
    x = as_tensor(x)
    factor = float(factor)
    out = Tensor(x.data * factor, requires_grad=x.requires_grad)

    def backward():
        x.accumulate_grad(out.grad * factor, own=True)

    _record(out, backward)
    return out


def concat_last_axis(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise _shape_error("concat_last_axis", a.shape, b.shape)
    out = Tensor(
        np.concatenate([a.data, b.data], axis=-1),
        requires_grad=a.requires_grad or b.requires_grad,
    )
    split = a.shape[-1]

    def backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(g[..., :split])
        if b.requires_grad:
            b.accumulate_grad(g[..., split:])

    _record(out, backward)
    return out


def embedding_lookup(table, ids):
    """Row gather ``table[ids]`` for an integer id array."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding_lookup: id out of range for table of {table.shape[0]} rows"
        )
    out = Tensor(table.data[ids], requires_grad=table.requires_grad)

    def backward():
        g = out.grad
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.ravel(), g.reshape(-1, table.shape[1]))
        table.accumulate_grad(dt, own=True)

    _record(out, backward)
    return out


def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad)

    def backward():
        x.accumulate_grad(out.grad.reshape(x.shape))

    _record(out, backward)
    return out


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    out = Tensor(x.data.transpose(axes), requires_grad=x.requires_grad)
    inverse = tuple(np.argsort(axes))

    def backward():
        x.accumulate_grad(out.grad.transpose(inverse))

    _record(out, backward)
    return out


def select_position(x, position):
    """Slice one sequence position: ``x[:, position, :]``."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise _shape_error("select_position", x.shape)
    out = Tensor(x.data[:, position, :], requires_grad=x.requires_grad)

    def backward():
        dx = np.zeros_like(x.data)
        dx[:, position, :] = out.grad
        x.accumulate_grad(dx, own=True)

    _record(out, backward)
    return out


def add_attention_bias(scores, bias):
    """Add a constant (non-differentiable) additive attention mask.

    ``bias`` has shape (batch, 1, 1, keys) and broadcasts over heads and
    query positions; the gradient passes through to ``scores`` unchanged.
    """
    scores = as_tensor(scores)
    bias = np.asarray(bias, dtype=np.float64)
    out = Tensor(scores.data + bias, requires_grad=scores.requires_grad)

    def backward():
        scores.accumulate_grad(out.grad)

    _record(out, backward)
    return out


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax_rows(x):
    """Softmax along the last axis with max-subtraction stabilization."""
    x = as_tensor(x)
    y = K.softmax_fwd(_rows(x.data)).reshape(x.shape)
    out = Tensor(y, requires_grad=x.requires_grad)

    def backward():
        dx = K.softmax_bwd(_rows(y), _rows(out.grad))
        x.accumulate_grad(dx.reshape(x.shape), own=True)

    _record(out, backward)
    return out


def sigmoid(x):
    x = as_tensor(x)
    y = K.sigmoid_fwd(x.data)
    out = Tensor(y, requires_grad=x.requires_grad)

    def backward():
        x.accumulate_grad(K.sigmoid_bwd(y, np.ascontiguousarray(out.grad)), own=True)

    _record(out, backward)
    return out


def gelu(x):
    """GELU in the tanh approximation (derivative matches exactly)."""
    x = as_tensor(x)
    out = Tensor(K.gelu_fwd(x.data), requires_grad=x.requires_grad)

    def backward():
        x.accumulate_grad(K.gelu_bwd(x.data, np.ascontiguousarray(out.grad)), own=True)

    _record(out, backward)
    return out


def layer_norm(x, gain, bias, eps=1e-12):
    """Normalize over the final axis, then apply learnable gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    k = x.shape[-1]
    if gain.shape != (k,) or bias.shape != (k,):
        raise _shape_error("layer_norm", x.shape, gain.shape, bias.shape)
    y2, xhat, inv_std = K.layernorm_fwd(_rows(x.data), gain.data, bias.data, eps)
    out = Tensor(y2.reshape(x.shape), requires_grad=(
        x.requires_grad or gain.requires_grad or bias.requires_grad
    ))

    def backward():
        dx, dgain, dbias = K.layernorm_bwd(
            xhat, inv_std, gain.data, _rows(out.grad)
        )
        if x.requires_grad:
            x.accumulate_grad(dx.reshape(x.shape), own=True)
        if gain.requires_grad:
            gain.accumulate_grad(dgain, own=True)
        if bias.requires_grad:
            bias.accumulate_grad(dbias, own=True)

    _record(out, backward)
    return out


def dropout(x, rate, rng, training):
    """Inverted dropout: identity in evaluation mode, scaled mask in training."""
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(np.float64) / keep
    out = Tensor(x.data * mask, requires_grad=x.requires_grad)

    def backward():
        x.accumulate_grad(out.grad * mask, own=True)

    _record(out, backward)
    return out


def mean(x):
    x = as_tensor(x)
    out = Tensor(np.mean(x.data), requires_grad=x.requires_grad)
    n = x.data.size

    def backward():
        x.accumulate_grad(np.full(x.shape, float(out.grad) / n), own=True)

    _record(out, backward)
    return out


def sum(x):
    x = as_tensor(x)
    out = Tensor(np.sum(x.data), requires_grad=x.requires_grad)

    def backward():
        x.accumulate_grad(np.full(x.shape, float(out.grad)), own=True)

    _record(out, backward)
    return out


def bce_loss(probabilities, targets):
    """Mean binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
    p = as_tensor(probabilities)
    t = targets.data if isinstance(targets, Tensor) else np.asarray(
        targets, dtype=np.float64
    )
    if p.shape != t.shape:
        raise _shape_error("bce_loss", p.shape, t.shape)
    t = np.ascontiguousarray(t)
    out = Tensor(K.bce_fwd(p.data, t, BCE_EPS), requires_grad=p.requires_grad)

    def backward():
        g = float(out.grad) / p.data.size
        p.accumulate_grad(K.bce_bwd(p.data, t, BCE_EPS, g), own=True)

    _record(out, backward)
    return out
