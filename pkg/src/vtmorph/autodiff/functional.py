"""Convolution, pooling and normalization ops over NCHW tensors.

Convolutions build a channel-major (C*kh*kw, N*Ho*Wo) column matrix and
run one GEMM against the flattened kernel. Adjoints scatter columns back
with a fixed kernel-offset loop, so results are deterministic. Pooling
uses a strided window view.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Strided view of shape N, C, Ho, Wo, kh, kw over a padded input."""
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def _col2im(cols: np.ndarray, out_shape, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Scatter-add columns N, Ho, Wo, C, kh, kw back into an N, C, Hp, Wp image."""
    n, ho, wo = cols.shape[:3]
    out = np.zeros(out_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            out[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += patch
    return out


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp_cn: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Channel-major padded input C, N, Hp, Wp -> column matrix (C*kh*kw, N*Ho*Wo)."""
    c, n = xp_cn.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp_cn.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp_cn[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im_cn(cols: np.ndarray, c: int, n: int, hp: int, wp: int, kh: int, kw: int, sh: int, sw: int,
               ho: int, wo: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add (C*kh*kw, N*Ho*Wo) columns into C, N, Hp, Wp."""
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += cols[:, i, j]
    return out


def _to_cn(x: np.ndarray, ph: int = 0, pw: int = 0) -> np.ndarray:
    """N, C, H, W -> zero-padded channel-major C, N, H + 2ph, W + 2pw."""
    n, c, h, w = x.shape
    out = np.zeros((c, n, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, :, ph : ph + h, pw : pw + w] = x.transpose(1, 0, 2, 3)
    return out


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation. ``x``: N,C,H,W; ``weight``: O,C,kh,kw; ``bias``: O."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho, wo = conv_output_size(h, kh, sh, ph), conv_output_size(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    cols = _im2col(_to_cn(x.data, ph, pw), kh, kw, sh, sw, ho, wo)
    wmat = weight.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcn = _col2im_cn(wmat.T @ gmat, c, n, h + 2 * ph, w + 2 * pw, kh, kw, sh, sw, ho, wo)
            gx = np.ascontiguousarray(gcn[:, :, ph : ph + h, pw : pw + w].transpose(1, 0, 2, 3))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._make(np.ascontiguousarray(out), parents, backward, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Transposed convolution (adjoint of ``conv2d``). ``weight``: C_in, C_out, kh, kw."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"conv_transpose2d: input {x.shape} incompatible with weight {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    _, o, kh, kw = weight.shape
    hf, wf = (h - 1) * sh + kh, (w - 1) * sw + kw
    ho, wo = hf - 2 * ph, wf - 2 * pw
    if ho < 1 or wo < 1:
        raise ValueError(f"conv_transpose2d: padding {padding} too large for input {x.shape}")
    xmat = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    wmat = weight.data.reshape(c, -1)
    full = _col2im_cn(wmat.T @ xmat, o, n, hf, wf, kh, kw, sh, sw, h, w)
    out = full[:, :, ph : ph + ho, pw : pw + wo].transpose(1, 0, 2, 3)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)

    def backward(g):
        gcols = _im2col(_to_cn(g, ph, pw), kh, kw, sh, sw, h, w)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray((wmat @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3))
        gw = (xmat @ gcols.T).reshape(weight.shape) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._make(np.ascontiguousarray(out), parents, backward, "conv_transpose2d")


def avg_pool2d(x, kernel: int = 2, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    stride = stride or kernel
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, kernel, stride, 0), conv_output_size(w, kernel, stride, 0)
    win = _windows(x.data, kernel, kernel, stride, stride, ho, wo)
    out = win.mean(axis=(4, 5))

    def backward(g):
        cols = np.broadcast_to((g / (kernel * kernel))[..., None, None], (n, c, ho, wo, kernel, kernel))
        return (_col2im(cols.transpose(0, 2, 3, 1, 4, 5), x.shape, kernel, kernel, stride, stride),)

    return Tensor._make(out, (x,), backward, "avg_pool2d")


def max_pool2d(x, kernel: int = 2, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    stride = stride or kernel
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, kernel, stride, 0), conv_output_size(w, kernel, stride, 0)
    win = _windows(x.data, kernel, kernel, stride, stride, ho, wo).reshape(n, c, ho, wo, -1)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = np.zeros((n, c, ho, wo, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        cols = onehot.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 2, 3, 1, 4, 5)
        return (_col2im(cols, x.shape, kernel, kernel, stride, stride),)

    return Tensor._make(out, (x,), backward, "max_pool2d")


def _normalize(x: Tensor, axes: tuple[int, ...], eps: float, op: str) -> Tensor:
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return Tensor._make(xhat, (x,), backward, op)


def instance_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane over H, W; optional per-channel affine."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"instance_norm: expected N,C,H,W input, got {x.shape}")
    out = _normalize(x, (2, 3), eps, "instance_norm")
    if weight is not None:
        out = out * as_tensor(weight).reshape(1, -1, 1, 1)
    if bias is not None:
        out = out + as_tensor(bias).reshape(1, -1, 1, 1)
    return out


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; optional elementwise affine."""
    x = as_tensor(x)
    out = _normalize(x, (x.ndim - 1,), eps, "layer_norm")
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as out_features x in_features."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight in_features {weight.shape[1]}")
    out = x @ weight.T
    return out + bias if bias is not None else out
