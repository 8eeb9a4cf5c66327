"""Spatial transformer core: affine grid generation and the differentiable
bilinear sampler.

Coordinates are normalized so that -1 and +1 are the centers of the border
pixels (corner-aligned).  A six-component theta (a,b,c,d,e,f) is the
row-major 2x3 matrix [[a,b,c],[d,e,f]] mapping target coordinates
(x_t, y_t, 1) to source coordinates, so the identity is (1,0,0,0,1,0).
Sampling outside [-1,1] reads zeros.
"""

from __future__ import annotations

import numpy as np

from .autodiff import NumericsError, ShapeError, Tensor, _wrap

IDENTITY_THETA = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

# Coordinates this close to a pixel center are snapped onto it, making the
# identity transform an exact identity map despite rounding in the
# normalize/unnormalize round trip.
_SNAP = 1e-6


def normalized_coords(n: int) -> np.ndarray:
    """Centers of n pixels in corner-aligned normalized coordinates."""
    if n < 1:
        raise ShapeError(f"axis length must be positive, got {n}")
    if n == 1:
        return np.zeros(1)
    return 2.0 * np.arange(n) / (n - 1) - 1.0


def _coord_basis(h: int, w: int) -> np.ndarray:
    """[H*W, 3] rows of (x_t, y_t, 1) over the target lattice."""
    xs = normalized_coords(w)
    ys = normalized_coords(h)
    gx, gy = np.meshgrid(xs, ys)  # [H,W]
    return np.stack([gx.ravel(), gy.ravel(), np.ones(h * w)], axis=1)


def make_affine_grid(theta, h: int, w: int) -> Tensor:
    """Source-coordinate grid for each target pixel.

    theta: [6] or [B,6]; returns [H,W,2] or [B,H,W,2] with source (x_s, y_s)
    per target pixel.  Linear in theta, so the gradient is exact.
    """
    theta = _wrap(theta)
    squeeze = theta.ndim == 1
    td = theta.data[None] if squeeze else theta.data
    if td.ndim != 2 or td.shape[1] != 6:
        raise ShapeError(f"theta must have 6 components, got shape {theta.shape}")
    b = td.shape[0]
    basis = _coord_basis(h, w).astype(td.dtype)  # [H*W,3]
    mats = td.reshape(b, 2, 3)
    grid = np.einsum("pk,bik->bpi", basis, mats)  # [B,H*W,2]
    grid = grid.reshape(b, h, w, 2)

    def backward(g):
        if squeeze:
            g = g[None]
        gm = np.einsum("bpi,pk->bik", g.reshape(b, h * w, 2), basis)
        dt = gm.reshape(b, 6)
        theta.accumulate(dt[0] if squeeze else dt)

    if squeeze:
        grid = grid[0]
    return Tensor._compose(grid, (theta,), backward)


def compose_theta(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """2x3 of aug(outer) @ aug(inner).

    Warping with ``outer`` and then warping the result with ``inner`` equals
    one warp with ``compose_theta(outer, inner)``.
    """
    a = np.vstack([np.asarray(outer, dtype=np.float64).reshape(2, 3),
                   [0.0, 0.0, 1.0]])
    b = np.vstack([np.asarray(inner, dtype=np.float64).reshape(2, 3),
                   [0.0, 0.0, 1.0]])
    return (a @ b)[:2].reshape(6)


def invert_theta(theta: np.ndarray) -> np.ndarray:
    """Theta of the inverse affine map."""
    m = np.vstack([np.asarray(theta, dtype=np.float64).reshape(2, 3),
                   [0.0, 0.0, 1.0]])
    return np.linalg.inv(m)[:2].reshape(6)


def _unnormalize(coord: np.ndarray, n: int) -> np.ndarray:
    """Normalized [-1,1] coordinate to fractional pixel index."""
    idx = (coord + 1.0) * 0.5 * (n - 1)
    rounded = np.rint(idx)
    return np.where(np.abs(idx - rounded) < _SNAP, rounded, idx)


def bilinear_sample(image, grid) -> Tensor:
    """Sample an image at grid coordinates with bilinear interpolation.

    image: [C,H,W] or [B,C,H,W]; grid: [Hg,Wg,2] or [B,Hg,Wg,2] of
    normalized (x, y) source coordinates.  Out-of-range reads are zero;
    gradients are analytic in both the image and the grid.
    """
    image, grid = _wrap(image), _wrap(grid)
    squeeze = image.ndim == 3
    img = image.data[None] if squeeze else image.data
    grd = grid.data[None] if grid.ndim == 3 else grid.data
    if img.ndim != 4 or grd.ndim != 4 or grd.shape[-1] != 2:
        raise ShapeError(
            f"bilinear_sample got image {image.shape} and grid {grid.shape}"
        )
    if grd.shape[0] == 1 and img.shape[0] > 1:
        grd = np.broadcast_to(grd, (img.shape[0],) + grd.shape[1:])
    if img.shape[0] != grd.shape[0]:
        raise ShapeError(
            f"batch mismatch: image {img.shape[0]} vs grid {grd.shape[0]}"
        )
    if np.isnan(grd).any():
        raise NumericsError("bilinear_sample got NaN grid coordinates")
    b, c, h, w = img.shape
    hg, wg = grd.shape[1], grd.shape[2]

    ix = _unnormalize(grd[..., 0].astype(np.float64), w)  # [B,Hg,Wg]
    iy = _unnormalize(grd[..., 1].astype(np.float64), h)
    x0 = np.floor(ix).astype(np.int64)
    y0 = np.floor(iy).astype(np.int64)
    dx = ix - x0
    dy = iy - y0
    x1, y1 = x0 + 1, y0 + 1

    def corner(xi, yi):
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xc = np.clip(xi, 0, w - 1)
        yc = np.clip(yi, 0, h - 1)
        bidx = np.arange(b)[:, None, None]
        vals = img[bidx, :, yc, xc]  # [B,Hg,Wg,C]
        vals = vals * valid[..., None]
        return np.moveaxis(vals, -1, 1), valid, xc, yc  # [B,C,Hg,Wg]

    v00, m00, xc00, yc00 = corner(x0, y0)
    v01, m01, xc01, yc01 = corner(x1, y0)
    v10, m10, xc10, yc10 = corner(x0, y1)
    v11, m11, xc11, yc11 = corner(x1, y1)

    w00 = ((1.0 - dx) * (1.0 - dy))[:, None]
    w01 = (dx * (1.0 - dy))[:, None]
    w10 = ((1.0 - dx) * dy)[:, None]
    w11 = (dx * dy)[:, None]
    out = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11).astype(
        img.dtype, copy=False
    )

    def backward(g):
        if squeeze:
            g = g[None]
        g = g.astype(np.float64, copy=False)
        if image.requires_grad:
            dimg = np.zeros((b, c, h, w), dtype=np.float64)
            bidx = np.broadcast_to(
                np.arange(b)[:, None, None, None], (b, c, hg, wg)
            )
            cidx = np.broadcast_to(
                np.arange(c)[None, :, None, None], (b, c, hg, wg)
            )
            for wgt, msk, xc, yc in (
                (w00, m00, xc00, yc00),
                (w01, m01, xc01, yc01),
                (w10, m10, xc10, yc10),
                (w11, m11, xc11, yc11),
            ):
                contrib = g * wgt * msk[:, None]
                np.add.at(
                    dimg,
                    (bidx, cidx,
                     np.broadcast_to(yc[:, None], (b, c, hg, wg)),
                     np.broadcast_to(xc[:, None], (b, c, hg, wg))),
                    contrib,
                )
            image.accumulate(dimg[0] if squeeze else dimg)
        if grid.requires_grad:
            dyw = dy[:, None]
            dxw = dx[:, None]
            dv_dix = ((1.0 - dyw) * (v01 - v00) + dyw * (v11 - v10))
            dv_diy = ((1.0 - dxw) * (v10 - v00) + dxw * (v11 - v01))
            gx = (g * dv_dix).sum(axis=1) * (0.5 * (w - 1))
            gy = (g * dv_diy).sum(axis=1) * (0.5 * (h - 1))
            dgrid = np.stack([gx, gy], axis=-1)
            if grid.ndim == 3:
                dgrid = dgrid.sum(axis=0)
            grid.accumulate(dgrid)

    if squeeze:
        out = out[0]
    return Tensor._compose(out, (image, grid), backward)


def warp_image(image: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Non-differentiating convenience: sample ``image`` on grid(theta)."""
    img = np.asarray(image)
    grid = make_affine_grid(Tensor(np.asarray(theta, dtype=np.float64)),
                            img.shape[-2], img.shape[-1])
    return bilinear_sample(Tensor(img), grid).data


def mean_theta(thetas: np.ndarray) -> np.ndarray:
    """Componentwise mean of an [N,6] stack of theta vectors."""
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.ndim != 2 or thetas.shape[1] != 6 or thetas.shape[0] == 0:
        raise ShapeError(f"expected a non-empty [N,6] stack, got {thetas.shape}")
    return thetas.mean(axis=0)


def theta_statistics(thetas: np.ndarray) -> dict:
    """Per-component mean and variance of a theta stack."""
    thetas = np.asarray(thetas, dtype=np.float64)
    return {
        "mean": thetas.mean(axis=0),
        "var": thetas.var(axis=0),
    }
