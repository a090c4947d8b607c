"""Shared independent oracles for the test suite.

These deliberately avoid the production code paths: gradients come from
central finite differences, convolutions from a six-nested-loop sum.
"""

import numpy as np


def central_difference(f, arrays, h=1e-5):
    """Numerical gradient of scalar-valued `f` w.r.t. each array in `arrays`.

    `f` takes no arguments and must re-read `arrays` on every call; the
    entries are perturbed in place.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-6):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def conv2d_naive(x, w, stride=1, padding=0):
    """Direct convolution sum over six nested loops. Reference only."""
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    assert ci == c
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for yi in range(oh):
                for xi in range(ow):
                    acc = 0.0
                    for cc in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += (
                                    xp[ni, cc, yi * stride + i, xi * stride + j]
                                    * w[oi, cc, i, j]
                                )
                    out[ni, oi, yi, xi] = acc
    return out


def depthwise_conv2d_naive(x, w, stride=1, padding=0):
    """Per-channel reference: channel c convolved with kernel w[c, 0]."""
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    assert co == c and ci == 1
    outs = []
    for cc in range(c):
        outs.append(
            conv2d_naive(x[:, cc:cc + 1], w[cc:cc + 1], stride, padding)
        )
    return np.concatenate(outs, axis=1)


def softmax_np(z, axis=-1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)
