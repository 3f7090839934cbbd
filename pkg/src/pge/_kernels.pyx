# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the dense forward/backward primitives.

Single-threaded with a fixed accumulation order in every reduction, so
results are bit-identical across runs and across caller thread counts.
The hot loops release the GIL; parallelism belongs to the callers
(per-restart, per-source), never inside a kernel.
"""

from libc.math cimport exp, log

import numpy as np

NAME = "compiled"


def matmul(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    out_arr = np.zeros((m, n))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double aip
    with nogil:
        for i in range(m):
            for p in range(k):
                aip = a[i, p]
                for j in range(n):
                    out[i, j] += aip * b[p, j]
    return out_arr


def matmul_grad_a(double[:, ::1] g, double[:, ::1] b):
    # d(a@b)/da contracted with g: g @ b.T
    cdef Py_ssize_t m = g.shape[0], n = g.shape[1], k = b.shape[0]
    out_arr = np.zeros((m, k))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double acc
    with nogil:
        for i in range(m):
            for p in range(k):
                acc = 0.0
                for j in range(n):
                    acc += g[i, j] * b[p, j]
                out[i, p] = acc
    return out_arr


def matmul_grad_b(double[:, ::1] a, double[:, ::1] g):
    # d(a@b)/db contracted with g: a.T @ g
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = g.shape[1]
    out_arr = np.zeros((k, n))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double aip
    with nogil:
        for i in range(m):
            for p in range(k):
                aip = a[i, p]
                for j in range(n):
                    out[p, j] += aip * g[i, j]
    return out_arr


def bias_add(double[:, ::1] x, double[::1] b):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out_arr = np.empty((m, n))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(n):
                out[i, j] = x[i, j] + b[j]
    return out_arr


def bias_grad(double[:, ::1] g):
    cdef Py_ssize_t m = g.shape[0], n = g.shape[1]
    out_arr = np.zeros(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(n):
                out[j] += g[i, j]
    return out_arr


def conv_bias_add(double[:, :, :, ::1] x, double[::1] b):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    out_arr = np.empty((n, c, h, w))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, y, z
    cdef double bj
    with nogil:
        for i in range(n):
            for j in range(c):
                bj = b[j]
                for y in range(h):
                    for z in range(w):
                        out[i, j, y, z] = x[i, j, y, z] + bj
    return out_arr


def conv_bias_grad(double[:, :, :, ::1] g):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], h = g.shape[2], w = g.shape[3]
    out_arr = np.zeros(c)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, y, z
    cdef double acc
    with nogil:
        for j in range(c):
            acc = 0.0
            for i in range(n):
                for y in range(h):
                    for z in range(w):
                        acc += g[i, j, y, z]
            out[j] = acc
    return out_arr


cdef void _relu1d(double[::1] x, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = x[i] if x[i] > 0.0 else 0.0


cdef void _relu1d_grad(double[::1] x, double[::1] g, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = g[i] if x[i] > 0.0 else 0.0


def relu(x):
    out = np.empty_like(x)
    _relu1d(x.reshape(-1), out.reshape(-1))
    return out


def relu_grad(x, g):
    out = np.empty_like(g)
    _relu1d_grad(x.reshape(-1), g.reshape(-1), out.reshape(-1))
    return out


def conv2d(double[:, :, :, ::1] x, double[:, :, :, ::1] w):
    """Valid 2-D cross-correlation, stride 1, NCHW layout."""
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = h - kh + 1, ow = wd - kw + 1
    out_arr = np.zeros((n, co, oh, ow))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t p, o, c, y, z, ky, kx
    cdef double acc
    with nogil:
        for p in range(n):
            for o in range(co):
                for y in range(oh):
                    for z in range(ow):
                        acc = 0.0
                        for c in range(ci):
                            for ky in range(kh):
                                for kx in range(kw):
                                    acc += x[p, c, y + ky, z + kx] * w[o, c, ky, kx]
                        out[p, o, y, z] = acc
    return out_arr


def conv2d_grad_x(double[:, :, :, ::1] g, double[:, :, :, ::1] w):
    cdef Py_ssize_t n = g.shape[0], co = g.shape[1], oh = g.shape[2], ow = g.shape[3]
    cdef Py_ssize_t ci = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    out_arr = np.zeros((n, ci, oh + kh - 1, ow + kw - 1))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t p, o, c, y, z, ky, kx
    cdef double gv
    with nogil:
        for p in range(n):
            for o in range(co):
                for y in range(oh):
                    for z in range(ow):
                        gv = g[p, o, y, z]
                        for c in range(ci):
                            for ky in range(kh):
                                for kx in range(kw):
                                    out[p, c, y + ky, z + kx] += gv * w[o, c, ky, kx]
    return out_arr


def conv2d_grad_w(double[:, :, :, ::1] x, double[:, :, :, ::1] g):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = g.shape[1], oh = g.shape[2], ow = g.shape[3]
    cdef Py_ssize_t kh = h - oh + 1, kw = wd - ow + 1
    out_arr = np.zeros((co, ci, kh, kw))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t p, o, c, y, z, ky, kx
    cdef double gv
    with nogil:
        for p in range(n):
            for o in range(co):
                for y in range(oh):
                    for z in range(ow):
                        gv = g[p, o, y, z]
                        for c in range(ci):
                            for ky in range(kh):
                                for kx in range(kw):
                                    out[o, c, ky, kx] += gv * x[p, c, y + ky, z + kx]
    return out_arr


def mse_per_sample(double[:, ::1] pred, double[:, ::1] target):
    cdef Py_ssize_t m = pred.shape[0], f = pred.shape[1]
    out_arr = np.empty(m)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double acc, d
    with nogil:
        for i in range(m):
            acc = 0.0
            for j in range(f):
                d = pred[i, j] - target[i, j]
                acc += d * d
            out[i] = acc / f
    return out_arr


def mse_grad_pred(double[:, ::1] pred, double[:, ::1] target, double[::1] gv):
    cdef Py_ssize_t m = pred.shape[0], f = pred.shape[1]
    out_arr = np.empty((m, f))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double scale
    with nogil:
        for i in range(m):
            scale = 2.0 * gv[i] / f
            for j in range(f):
                out[i, j] = scale * (pred[i, j] - target[i, j])
    return out_arr


def softmax_xent(double[:, ::1] logits, long long[::1] labels):
    """Per-sample cross-entropy losses and the softmax probabilities."""
    cdef Py_ssize_t m = logits.shape[0], k = logits.shape[1]
    losses_arr = np.empty(m)
    probs_arr = np.empty((m, k))
    cdef double[::1] losses = losses_arr
    cdef double[:, ::1] probs = probs_arr
    cdef Py_ssize_t i, j
    cdef double mx, s
    with nogil:
        for i in range(m):
            mx = logits[i, 0]
            for j in range(1, k):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            s = 0.0
            for j in range(k):
                probs[i, j] = exp(logits[i, j] - mx)
                s += probs[i, j]
            for j in range(k):
                probs[i, j] /= s
            losses[i] = log(s) + mx - logits[i, labels[i]]
    return losses_arr, probs_arr


def softmax_xent_grad(double[:, ::1] probs, long long[::1] labels, double[::1] gv):
    cdef Py_ssize_t m = probs.shape[0], k = probs.shape[1]
    out_arr = np.empty((m, k))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(k):
                out[i, j] = probs[i, j] * gv[i]
            out[i, labels[i]] -= gv[i]
    return out_arr


def mean_vec(double[::1] v):
    cdef Py_ssize_t m = v.shape[0]
    cdef double acc = 0.0
    cdef Py_ssize_t i
    with nogil:
        for i in range(m):
            acc += v[i]
    return acc / m
