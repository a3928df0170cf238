"""Differentiable affine warping.

Conventions (fixed; predicted parameters depend on them):

* an image spans [-1, 1] x [-1, 1], x to the right, y downward;
* pixel (i, j) has its centre at x_j = (2j + 1) / W - 1, y_i = (2i + 1) / H - 1;
* theta = [a, b, tx, c, d, ty] maps *output* coordinates to *source*
  coordinates (pull warping): src = [[a, b, tx], [c, d, ty]] @ [x, y, 1];
* samples falling outside the source read zeros.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def pixel_centers(n: int) -> np.ndarray:
    return (2.0 * np.arange(n) + 1.0) / n - 1.0


def base_mesh(h: int, w: int, dtype=np.float64) -> np.ndarray:
    """Homogeneous pixel-centre coordinates, shape (H*W, 3), row-major over (i, j)."""
    ys, xs = np.meshgrid(pixel_centers(h), pixel_centers(w), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)], axis=1).astype(dtype)


def affine_grid(theta, out_shape) -> Tensor:
    """Sampling grid N x H x W x 2 holding source (x, y) for every output pixel."""
    theta = ad.as_tensor(theta)
    if len(out_shape) != 4 or min(out_shape) < 1:
        raise ValueError(f"affine_grid: out_shape must be positive N x C x H x W, got {tuple(out_shape)}")
    n, _, h, w = out_shape
    if theta.shape != (n, 6):
        raise ValueError(f"affine_grid: theta {theta.shape} does not match batch of {n} (expected ({n}, 6))")
    mesh = Tensor(base_mesh(h, w, theta.dtype)[None])
    mats = theta.reshape(n, 2, 3).transpose(0, 2, 1)  # N, 3, 2
    return (mesh @ mats).reshape(n, h, w, 2)


def grid_sample_bilinear(img, grid) -> Tensor:
    """Bilinearly sample ``img`` (N,C,H,W) at ``grid`` (N,Ho,Wo,2) with zero padding.

    Differentiable with respect to both the image and the grid.
    """
    img, grid = ad.as_tensor(img), ad.as_tensor(grid)
    if img.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2 or grid.shape[0] != img.shape[0]:
        raise ValueError(f"grid_sample: image {img.shape} incompatible with grid {grid.shape}")
    n, c, h, w = img.shape
    _, ho, wo, _ = grid.shape
    dt = img.dtype
    px = ((grid.data[..., 0] + 1.0) * w - 1.0) * 0.5
    py = ((grid.data[..., 1] + 1.0) * h - 1.0) * 0.5
    x0 = np.floor(px)
    y0 = np.floor(py)
    wx1 = (px - x0).astype(dt)
    wy1 = (py - y0).astype(dt)
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    flat = img.data.reshape(n, c, h * w)
    batch = np.arange(n)[:, None, None]

    corners = []
    for dy, wy in ((0, wy0), (1, wy1)):
        for dx, wx in ((0, wx0), (1, wx1)):
            yy, xx = y0 + dy, x0 + dx
            valid = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            idx = np.where(valid, yy * w + xx, 0)
            vals = flat[batch, :, idx]  # N, Ho, Wo, C
            vals = np.moveaxis(vals, -1, 1) * valid[:, None].astype(dt)
            corners.append((idx, valid, wy, wx, vals))

    (_, _, _, _, v00), (_, _, _, _, v01), (_, _, _, _, v10), (_, _, _, _, v11) = corners
    out = (wy0[:, None] * (wx0[:, None] * v00 + wx1[:, None] * v01)
           + wy1[:, None] * (wx0[:, None] * v10 + wx1[:, None] * v11))

    def backward(g):
        gimg = None
        if img.requires_grad:
            gimg = np.zeros(n * c * h * w, dtype=np.float64)
            offsets = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w)  # N, C
            for idx, valid, wy, wx, _ in corners:
                weights = (g * (wy * wx * valid)[:, None]).reshape(-1)
                target = (offsets[:, :, None, None] + idx[:, None]).reshape(-1)
                gimg += np.bincount(target, weights=weights, minlength=gimg.size)
            gimg = gimg.reshape(n, c, h, w).astype(dt)
        ggrid = None
        if grid.requires_grad:
            dpx = wy0[:, None] * (v01 - v00) + wy1[:, None] * (v11 - v10)
            dpy = wx0[:, None] * (v10 - v00) + wx1[:, None] * (v11 - v01)
            ggrid = np.stack([(g * dpx).sum(axis=1) * (0.5 * w), (g * dpy).sum(axis=1) * (0.5 * h)], axis=-1)
            ggrid = ggrid.astype(grid.dtype)
        return gimg, ggrid

    return Tensor._make(out.astype(dt), (img, grid), backward, "grid_sample")


def warp(img, theta) -> Tensor:
    """Resample ``img`` through the affine map ``theta`` (one 6-vector per batch item)."""
    img = ad.as_tensor(img)
    theta = ad.as_tensor(theta)
    if theta.ndim == 1:
        theta = theta.reshape(1, 6)
    return grid_sample_bilinear(img, affine_grid(theta, img.shape))


def warp_array(img: np.ndarray, theta) -> np.ndarray:
    """Numpy convenience: warp a single H x W image (or N x 1 x H x W batch) without taping."""
    img = np.asarray(img)
    single = img.ndim == 2
    batch = img[None, None] if single else img
    th = np.asarray(theta, dtype=np.float64).reshape(-1, 6)
    if th.shape[0] == 1 and batch.shape[0] > 1:
        th = np.repeat(th, batch.shape[0], axis=0)
    with ad.no_grad(), ad.precision(np.float64):
        out = warp(Tensor(batch.astype(np.float64)), Tensor(th)).data
    out = out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)
    return out[0, 0] if single else out


def to_matrix(theta) -> np.ndarray:
    """Homogeneous 3x3 form(s) of one or many 6-vectors."""
    th = np.asarray(theta, dtype=np.float64)
    mats = np.zeros(th.shape[:-1] + (3, 3))
    mats[..., :2, :] = th.reshape(th.shape[:-1] + (2, 3))
    mats[..., 2, 2] = 1.0
    return mats


def from_matrix(mats: np.ndarray) -> np.ndarray:
    return mats[..., :2, :].reshape(mats.shape[:-2] + (6,))


def invert(theta) -> np.ndarray:
    th = np.asarray(theta, dtype=np.float64)
    det = th[..., 0] * th[..., 4] - th[..., 1] * th[..., 3]
    if np.any(np.abs(det) <= 1e-8):
        raise ValueError(f"cannot invert singular affine matrix (determinant {np.min(np.abs(det)):.3g})")
    return from_matrix(np.linalg.inv(to_matrix(th)))


def compose(theta1, theta2) -> np.ndarray:
    """The map ``p -> theta1(theta2(p))``: homogeneous product theta1 @ theta2 truncated to 2x3."""
    return from_matrix(to_matrix(theta1) @ to_matrix(theta2))


def rotation(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([c, -s, 0.0, s, c, 0.0])


def make_theta(tx=0.0, ty=0.0, angle_deg=0.0, scale=1.0, shear=0.0, scale_y=None) -> np.ndarray:
    """Build [a, b, tx, c, d, ty] = translate @ rotate @ shear @ scale."""
    sy = scale if scale_y is None else scale_y
    r = to_matrix(rotation(np.deg2rad(angle_deg)))
    sh = to_matrix([1.0, shear, 0.0, 0.0, 1.0, 0.0])
    sc = to_matrix([scale, 0.0, 0.0, 0.0, sy, 0.0])
    m = r @ sh @ sc
    m[0, 2], m[1, 2] = tx, ty
    return from_matrix(m)


_CORNERS = np.array([[-1.0, -1.0, 1.0], [1.0, -1.0, 1.0], [-1.0, 1.0, 1.0], [1.0, 1.0, 1.0]])


def corner_error(theta_pred, theta_true, h: int, w: int) -> np.ndarray | float:
    """Mean pixel distance between the four image corners mapped by each transform."""
    tp = np.asarray(theta_pred, dtype=np.float64).reshape(-1, 2, 3)
    tt = np.asarray(theta_true, dtype=np.float64).reshape(-1, 2, 3)
    diff = np.einsum("nij,kj->nki", tp - tt, _CORNERS)  # N, 4, 2 normalized
    dist = np.hypot(diff[..., 0] * (w / 2.0), diff[..., 1] * (h / 2.0)).mean(axis=1)
    return float(dist[0]) if np.ndim(theta_pred) == 1 and np.ndim(theta_true) == 1 else dist
