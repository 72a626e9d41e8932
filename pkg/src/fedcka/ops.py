"""Neural-network primitives built on :mod:`fedcka.tensor`."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from .tensor import Tensor, as_tensor, matmul


def relu(x: Tensor) -> Tensor:
    return x.relu()


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias with weight stored as (in_features, out_features)."""
    return matmul(x, weight) + bias


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Valid (unpadded, stride 1) 2-d cross-correlation.

    Args:
        x: input of shape (B, C, H, W).
        kernel: weights of shape (O, C, kh, kw).
        bias: per-output-channel offsets of shape (O,).

    Returns:
        Tensor of shape (B, O, H - kh + 1, W - kw + 1).
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape}, {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise DimensionError(f"conv2d channel mismatch: input {C}, kernel {Ck}")
    if bias.shape != (O,):
        raise DimensionError(f"conv2d bias must have shape ({O},), got {bias.shape}")
    if H < kh or W < kw:
        raise DimensionError(f"conv2d input {H}x{W} smaller than kernel {kh}x{kw}")
    Ho, Wo = H - kh + 1, W - kw + 1

    # im2col in channel-last order: rows (B*Ho*Wo), columns (kh, kw, C)
    x_cl = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    windows = sliding_window_view(x_cl, (kh, kw), axis=(1, 2))  # (B, Ho, Wo, C, kh, kw)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * C)
    kmat = kernel.data.transpose(0, 2, 3, 1).reshape(O, kh * kw * C)
    out = (cols @ kmat.T + bias.data).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (gmat.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
        if bias.requires_grad:
            gb = gmat.sum(axis=0)
        if x.requires_grad:
            gcols = (gmat @ kmat).reshape(B, Ho, Wo, kh, kw, C)
            gx_cl = np.zeros((B, H, W, C))
            for i in range(kh):
                for j in range(kw):
                    gx_cl[:, i:i + Ho, j:j + Wo, :] += gcols[:, :, :, i, j, :]
            gx = np.ascontiguousarray(gx_cl.transpose(0, 3, 1, 2))
        return gx, gk, gb

    return Tensor._make(np.ascontiguousarray(out), (x, kernel, bias), backward)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling.

    The gradient goes to the maximal element of each window; ties go to the
    first element in row-major order.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects a 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    if H % window or W % window:
        raise DimensionError(f"maxpool2d needs spatial dims divisible by {window}, got {H}x{W}")
    Ho, Wo = H // window, W // window
    blocks = (
        x.data.reshape(B, C, Ho, window, Wo, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, Ho, Wo, window * window)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gblocks = np.zeros((B, C, Ho, Wo, window * window))
        np.put_along_axis(gblocks, idx[..., None], g[..., None], axis=-1)
        gx = (
            gblocks.reshape(B, C, Ho, Wo, window, window)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(B, C, H, W)
        )
        return (gx,)

    return Tensor._make(out, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (batch, classes), got {logits.shape}")
    B, K = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"labels must have shape ({B},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise IndexError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.intp)

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    logp = z - logsumexp[:, None]
    loss = -logp[np.arange(B), labels].mean()

    def backward(g):
        probs = np.exp(logp)
        probs[np.arange(B), labels] -= 1.0
        return (probs * (g / B),)

    return Tensor._make(np.asarray(loss), (logits,), backward)
