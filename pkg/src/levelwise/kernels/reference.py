"""NumPy reference implementations of the hot numeric kernels.

These are the fallback backend used when the compiled extension is not
available, and the ground truth the compiled kernels are tested against.
All functions take and return C-contiguous float64 arrays; callers are
responsible for shape handling (elementwise kernels accept any shape,
row kernels expect 2-D input where the reduction runs over the last axis).
"""

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715


def sigmoid_fwd(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_bwd(y, dy):
    return dy * y * (1.0 - y)


def gelu_fwd(x):
    u = GELU_C * (x + GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd(x, dy):
    u = GELU_C * (x + GELU_A * x * x * x)
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax_fwd(x):
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_bwd(y, dy):
    inner = np.sum(dy * y, axis=-1, keepdims=True)
    return y * (dy - inner)


def layernorm_fwd(x, gain, bias, eps):
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gain + bias, xhat, inv_std[..., 0]


def layernorm_bwd(xhat, inv_std, gain, dy):
    dgain = np.sum(dy * xhat, axis=0)
    dbias = np.sum(dy, axis=0)
    dxhat = dy * gain
    m1 = np.mean(dxhat, axis=-1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    dx = inv_std[..., None] * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


def bce_fwd(p, t, eps):
    pc = np.clip(p, eps, 1.0 - eps)
    return float(np.mean(-(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))))


def bce_bwd(p, t, eps, scale):
    pc = np.clip(p, eps, 1.0 - eps)
    inside = (p >= eps) & (p <= 1.0 - eps)
    return np.where(inside, scale * (pc - t) / (pc * (1.0 - pc)), 0.0)


def adam_step(value, grad, m, v, lr, beta1, beta2, eps, c1, c2):
    """One fused Adam update, in place on value/m/v.

    c1, c2 are the bias corrections 1 - beta1**t and 1 - beta2**t.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
