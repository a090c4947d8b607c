"""Network-level differentiable operations: convolution, pooling,
batch normalization and the classification loss.

All functions take and return :class:`~mixquant.tensor.Tensor` and wire
their own backward closures. Convolutions are im2col-based; the naive
nested-loop reference lives in the test suite, not here.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor


def _conv_out_extent(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int,
             oh: int, ow: int) -> np.ndarray:
    """Strided view (N, C, kh, kw, oh, ow) over the padded input."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
    )


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _unpad_accumulate(dxp: np.ndarray, shape: tuple, padding: int) -> np.ndarray:
    if padding == 0:
        return dxp
    h, w = shape[2], shape[3]
    return dxp[:, :, padding:padding + h, padding:padding + w]


def _scatter_windows(d6: np.ndarray, xp_shape: tuple, kh: int, kw: int,
                     stride: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of `_windows`: scatter-add per-window gradients back."""
    dxp = np.zeros(xp_shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d6[:, :, i, j]
    return dxp


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D convolution (cross-correlation), NCHW input, OIHW kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}"
        )
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {weight.shape}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(w, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ValueError(
            f"conv2d output would be empty: input {x.shape}, kernel {weight.shape}, "
            f"stride={stride}, padding={padding}"
        )

    xp = _pad(x.data, padding)
    cols = _windows(xp, kh, kw, stride, oh, ow).reshape(n, c * kh * kw, oh * ow)
    wmat = weight.data.reshape(o, c * kh * kw)
    out_data = (wmat @ cols).reshape(n, o, oh, ow)

    requires = x.requires_grad or weight.requires_grad

    def backward(g: np.ndarray) -> None:
        g2 = g.reshape(n, o, oh * ow)
        if weight.requires_grad:
            dw = np.einsum("nop,ncp->oc", g2, cols).reshape(weight.shape)
            weight._accumulate(dw)
        if x.requires_grad:
            dcols = np.einsum("oc,nop->ncp", wmat, g2)
            d6 = dcols.reshape(n, c, kh, kw, oh, ow)
            dxp = _scatter_windows(d6, xp.shape, kh, kw, stride, oh, ow)
            x._accumulate(_unpad_accumulate(dxp, x.shape, padding))

    return Tensor(out_data, requires, (x, weight),
                  backward if requires else None, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Per-channel convolution (groups == channels), kernel (C, 1, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(
            f"depthwise_conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}"
        )
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if co != c or ci != 1:
        raise ValueError(
            f"depthwise_conv2d kernel must be ({c}, 1, kh, kw) for input {x.shape}, "
            f"got {weight.shape}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(w, kw, stride, padding)

    xp = _pad(x.data, padding)
    win = _windows(xp, kh, kw, stride, oh, ow)
    k2d = weight.data[:, 0]
    out_data = np.einsum("ncijhw,cij->nchw", win, k2d)

    requires = x.requires_grad or weight.requires_grad

    def backward(g: np.ndarray) -> None:
        if weight.requires_grad:
            dw = np.einsum("nchw,ncijhw->cij", g, win)
            weight._accumulate(dw.reshape(weight.shape))
        if x.requires_grad:
            d6 = np.einsum("nchw,cij->ncijhw", g, k2d)
            dxp = _scatter_windows(d6, xp.shape, kh, kw, stride, oh, ow)
            x._accumulate(_unpad_accumulate(dxp, x.shape, padding))

    return Tensor(out_data, requires, (x, weight),
                  backward if requires else None, "dwconv2d")


def _pool_prep(x: Tensor, k: int) -> tuple:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(
            f"pooling window {k} must divide spatial extents of {x.shape}"
        )
    oh, ow = h // k, w // k
    tiles = (
        x.data.reshape(n, c, oh, k, ow, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh, ow, k * k)
    )
    return n, c, oh, ow, tiles


def _pool_restore(d5: np.ndarray, n: int, c: int, oh: int, ow: int, k: int) -> np.ndarray:
    return (
        d5.reshape(n, c, oh, ow, k, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh * k, ow * k)
    )


def max_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping max pooling; gradient routes to the first argmax."""
    n, c, oh, ow, tiles = _pool_prep(x, k)
    idx = tiles.argmax(axis=-1)
    out_data = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray) -> None:
        d5 = np.zeros_like(tiles)
        np.put_along_axis(d5, idx[..., None], g[..., None], axis=-1)
        x._accumulate(_pool_restore(d5, n, c, oh, ow, k))

    return Tensor(out_data, x.requires_grad, (x,),
                  backward if x.requires_grad else None, "maxpool")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    n, c, oh, ow, tiles = _pool_prep(x, k)
    out_data = tiles.mean(axis=-1)

    def backward(g: np.ndarray) -> None:
        d5 = np.repeat(g[..., None] / (k * k), k * k, axis=-1)
        x._accumulate(_pool_restore(d5, n, c, oh, ow, k))

    return Tensor(out_data, x.requires_grad, (x,),
                  backward if x.requires_grad else None, "avgpool")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    momentum: float = 0.9,
    training: bool = True,
    update_running: bool = True,
) -> Tensor:
    """Per-channel batch normalization for (N, C) or (N, C, H, W) inputs.

    Train mode normalizes by batch statistics (biased variance) and,
    unless `update_running` is off, folds them into the running state
    with retention `momentum`. Eval mode uses the running statistics.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if x.ndim == 2:
        axes: tuple = (0,)
        bshape = (1, -1)
    elif x.ndim == 4:
        axes = (0, 2, 3)
        bshape = (1, -1, 1, 1)
    else:
        raise ValueError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")

    gam = gamma.data.reshape(bshape)
    bet = beta.data.reshape(bshape)
    m = x.data.size // x.shape[1]

    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        if update_running:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu.reshape(-1)
            running_var *= momentum
            running_var += (1.0 - momentum) * var.reshape(-1)
    else:
        mu = running_mean.reshape(bshape)
        var = running_var.reshape(bshape)

    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * istd
    out_data = gam * xhat + bet

    requires = x.requires_grad or gamma.requires_grad or beta.requires_grad

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            if training:
                gsum = g.sum(axis=axes, keepdims=True)
                gx = (g * xhat).sum(axis=axes, keepdims=True)
                dx = (gam * istd / m) * (m * g - gsum - xhat * gx)
            else:
                dx = g * gam * istd
            x._accumulate(dx)

    return Tensor(out_data, requires, (x, gamma, beta),
                  backward if requires else None, "batch_norm")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer class labels.

    Gradient w.r.t. the logits is (softmax - onehot) / batch.
    """
    if logits.ndim != 2:
        raise ValueError(f"logits must be (batch, classes), got {logits.shape}")
    labels = np.asarray(labels)
    n, num_classes = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"label out of range [0, {num_classes}): "
            f"min={labels.min()}, max={labels.max()}"
        )

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n), labels]
    out_data = np.mean(lse - picked)

    def backward(g: np.ndarray) -> None:
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(n), labels] -= 1.0
        logits._accumulate(float(g) * probs / n)

    return Tensor(out_data, logits.requires_grad, (logits,),
                  backward if logits.requires_grad else None, "softmax_ce")


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax predictions matching the labels."""
    return float(np.mean(logits.argmax(axis=1) == np.asarray(labels)))
