"""Differentiable ops on NCHW tensors.

Only what the attention U-Net needs: convolution, batch norm, 2x2 pooling,
nearest upsampling, pointwise activations, channel concat, elementwise
product and the soft Dice loss.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ContractError, DimensionError, NumericError
from . import kinks
from .core import DTYPE, Tensor, make_result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected a 4-d (N, C, H, W) tensor, got shape {x.shape}")


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values in result")


# -- convolution ---------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Return columns shaped (C, kh, kw, N, ho, wo)."""
    n, c, h, w = x.shape
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x
    else:
        xp = x
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def _col2im(dcols: np.ndarray, x_shape, stride: int, padding: int) -> np.ndarray:
    c, kh, kw, n, ho, wo = dcols.shape
    _, _, h, w = x_shape
    dxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    dxp = dxp[:, :, padding:padding + h, padding:padding + w]
    return dxp.transpose(1, 0, 2, 3)


def _conv_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if kh == kw == 1 and stride == 1 and padding == 0:
        cols = x.transpose(1, 0, 2, 3).reshape(c, -1)
    else:
        cols = _im2col(x, kh, kw, stride, padding, ho, wo).reshape(c * kh * kw, -1)
    out = (w.reshape(o, -1) @ cols).reshape(o, n, ho, wo)
    return out, cols, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with optional per-output-channel bias."""
    _check_4d(x, "conv2d")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be (out, in, kh, kw), got {weight.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d: stride must be >= 1 and padding >= 0")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")

    w = weight.data
    out, cols, ho, wo = _conv_raw(x.data, w, stride, padding)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.data[None, :, None, None]
    _check_finite(out, "conv2d")

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        dw = (g2 @ cols.T).reshape(w.shape) if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            if stride == 1 and o < c and padding <= kh - 1 and padding <= kw - 1 and kh == kw:
                # transposed conv as a correlation with the flipped kernel; cheaper when o < c
                wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                dx, _, _, _ = _conv_raw(g, np.ascontiguousarray(wf), 1, kh - 1 - padding)
                dx = dx.transpose(1, 0, 2, 3)
            else:
                dcols = (w.reshape(o, -1).T @ g2).reshape(c, kh, kw, n, ho, wo)
                dx = _col2im(dcols, x.shape, stride, padding)
            dx = np.ascontiguousarray(dx)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, backward)


# -- normalization -------------------------------------------------------------

def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In ``train`` mode the batch statistics over (N, H, W) normalize the input
    and ``running_mean``/``running_var`` are updated in place (unbiased
    variance for the running estimate). ``eval`` mode uses the running
    statistics and mutates nothing.
    """
    _check_4d(x, "batchnorm2d")
    n, c, h, w = x.shape
    for name, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if np.shape(arr) != (c,):
            raise DimensionError(f"batchnorm2d: {name} must have shape ({c},), got {np.shape(arr)}")
    xd = x.data
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise NumericError("batchnorm2d: train mode needs more than one value per channel")
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean[None, :, None, None]
        var = np.einsum("nchw,nchw->c", xc, xc) / m
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = xc
        xhat *= invstd[None, :, None, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    elif mode == "eval":
        m = n * h * w
        invstd = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean[None, :, None, None]) * invstd[None, :, None, None]
    else:
        raise ValueError(f"batchnorm2d: unknown mode {mode!r}")
    out = xhat * gamma.data[None, :, None, None]
    out += beta.data[None, :, None, None]

    def backward(g):
        dgamma = np.einsum("nchw,nchw->c", g, xhat) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            scale = (gamma.data * invstd)[None, :, None, None]
            if mode == "train":
                sum_g = g.sum(axis=(0, 2, 3)) if dbeta is None else dbeta
                sum_gx = np.einsum("nchw,nchw->c", g, xhat) if dgamma is None else dgamma
                dx = g - (sum_g / m)[None, :, None, None]
                dx -= xhat * (sum_gx / m)[None, :, None, None]
                dx *= scale
            else:
                dx = g * scale
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward)


# -- resampling ----------------------------------------------------------------

def max_pool2d(x: Tensor, k: int = 2, s: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties send the gradient to the first
    element of the window in row-major order."""
    _check_4d(x, "max_pool2d")
    if k != s:
        raise DimensionError("max_pool2d: only non-overlapping windows (k == s) are supported")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"max_pool2d: spatial dims {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    win = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    kinks.record(idx)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros((n, c, ho, wo, k * k), dtype=DTYPE)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return make_result(out, (x,), backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    _check_4d(x, "upsample2x")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward)


# -- pointwise -----------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    kinks.record(mask)
    out = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), backward)


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along the channel axis."""
    if len(tensors) < 2:
        raise DimensionError("concat_channels: need at least two tensors")
    for t in tensors:
        _check_4d(t, "concat_channels")
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise DimensionError(f"concat_channels: shape {t.shape} incompatible with {tensors[0].shape}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return make_result(out, tuple(tensors), backward)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may also be per-channel (N or 1, C, 1, 1)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_4d(a, "mul")
    _check_4d(b, "mul")
    if a.shape != b.shape:
        n, c = a.shape[:2]
        if not (b.shape[1] == c and b.shape[2:] == (1, 1) and b.shape[0] in (1, n)):
            raise DimensionError(f"mul: cannot combine {a.shape} and {b.shape}")
    out = a.data * b.data

    def backward(g):
        da = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        db = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return da, db

    return make_result(out, (a, b), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` with constant weights (test projections)."""
    weights = np.asarray(weights, dtype=DTYPE)
    if weights.shape != x.shape:
        raise DimensionError(f"weighted_sum: weights {weights.shape} != {x.shape}")
    out = np.asarray(np.vdot(x.data, weights))

    def backward(g):
        return (g * weights,)

    return make_result(out, (x,), backward)


# -- loss ----------------------------------------------------------------------

def dice_loss(pred: Tensor, target, smooth: float = 1.0, reduction: str = "batch") -> Tensor:
    """Soft Dice loss ``1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s)``.

    ``reduction="batch"`` pools every pixel of the batch into one overlap
    ratio. ``"per_sample"`` averages the per-image losses instead, which
    makes the loss a mean over samples.
    """
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    p = pred.data
    if p.shape != target.shape:
        raise DimensionError(f"dice_loss: pred {p.shape} and target {target.shape} differ")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ContractError("dice_loss: predictions must lie in [0, 1]")
    if not np.all((target == 0) | (target == 1)):
        raise ContractError("dice_loss: target must be binary")

    if reduction == "batch":
        inter = float(np.vdot(p, target))
        denom = float(p.sum() + target.sum()) + smooth
        num = 2.0 * inter + smooth
        loss = np.asarray(1.0 - num / denom)

        def backward(g):
            return (g * (num - 2.0 * target * denom) / denom**2,)

    elif reduction == "per_sample":
        n = p.shape[0]
        axes = tuple(range(1, p.ndim))
        inter = (p * target).sum(axis=axes)
        denom = p.sum(axis=axes) + target.sum(axis=axes) + smooth
        num = 2.0 * inter + smooth
        loss = np.asarray(np.mean(1.0 - num / denom))
        shape = (n,) + (1,) * (p.ndim - 1)

        def backward(g):
            d = denom.reshape(shape)
            return (g * (num.reshape(shape) - 2.0 * target * d) / (d**2 * n),)

    else:
        raise ValueError(f"dice_loss: unknown reduction {reduction!r}")
    _check_finite(loss, "dice_loss")
    return make_result(loss, (pred,), backward)
