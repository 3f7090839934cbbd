"""Pure NumPy implementations of the dense forward/backward primitives.

This is the fallback backend used when the compiled extension is not
available (see :mod:`pge.backend`).  Function signatures and semantics
match ``pge._kernels`` exactly; results may differ from the compiled
backend in the last few ulps because NumPy reductions use a different
summation order.  Each backend on its own is deterministic: no
parallelism happens inside any reduction.
"""

import numpy as np

NAME = "python"


def matmul(a, b):
    return a @ b


def matmul_grad_a(g, b):
    return g @ b.T


def matmul_grad_b(a, g):
    return a.T @ g


def bias_add(x, b):
    return x + b


def bias_grad(g):
    return g.sum(axis=0)


def conv_bias_add(x, b):
    return x + b[None, :, None, None]


def conv_bias_grad(g):
    return g.sum(axis=(0, 2, 3))


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x, g):
    return np.where(x > 0.0, g, 0.0)


def conv2d(x, w):
    """Valid 2-D cross-correlation, stride 1, NCHW layout.

    x: (n, ci, h, w), w: (co, ci, kh, kw) -> (n, co, h-kh+1, w-kw+1)
    """
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh, ow = h - kh + 1, wd - kw + 1
    out = np.zeros((n, co, oh, ow))
    for ky in range(kh):
        for kx in range(kw):
            patch = x[:, :, ky : ky + oh, kx : kx + ow]
            out += np.einsum("ncij,oc->noij", patch, w[:, :, ky, kx])
    return out


def conv2d_grad_x(g, w):
    co, ci, kh, kw = w.shape
    n, _, oh, ow = g.shape
    gx = np.zeros((n, ci, oh + kh - 1, ow + kw - 1))
    for ky in range(kh):
        for kx in range(kw):
            gx[:, :, ky : ky + oh, kx : kx + ow] += np.einsum(
                "noij,oc->ncij", g, w[:, :, ky, kx]
            )
    return gx


def conv2d_grad_w(x, g):
    n, ci, h, wd = x.shape
    _, co, oh, ow = g.shape
    kh, kw = h - oh + 1, wd - ow + 1
    gw = np.zeros((co, ci, kh, kw))
    for ky in range(kh):
        for kx in range(kw):
            patch = x[:, :, ky : ky + oh, kx : kx + ow]
            gw[:, :, ky, kx] = np.einsum("noij,ncij->oc", g, patch)
    return gw


def mse_per_sample(pred, target):
    d = pred - target
    return (d * d).mean(axis=1)


def mse_grad_pred(pred, target, gv):
    return (2.0 / pred.shape[1]) * (pred - target) * gv[:, None]


def softmax_xent(logits, labels):
    """Per-sample cross-entropy losses and the softmax probabilities.

    Returns (losses (m,), probs (m, k)); numerically stable via the
    row-max shift.
    """
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    rows = np.arange(logits.shape[0])
    losses = np.log(s[:, 0]) + mx[:, 0] - logits[rows, labels]
    return losses, probs


def softmax_xent_grad(probs, labels, gv):
    g = probs * gv[:, None]
    rows = np.arange(probs.shape[0])
    g[rows, labels] -= gv
    return g


def mean_vec(v):
    return float(v.mean())
