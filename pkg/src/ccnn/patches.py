"""Patch-grid geometry: extraction and average pooling as linear maps.

Images are (channels, height, width). A patch plan fixes a square window
swept over the (optionally zero-padded) image in row-major grid order; each
patch is flattened channel-major, so its vector is the concatenation over
channels of the row-major pixel window. Average pooling over the patch grid
is represented explicitly as a sparse matrix G so that pooling commutes with
everything linear downstream: pooled features are exactly G @ Z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse


@dataclass(frozen=True)
class ImageShape:
    """Shape of the images a plan applies to."""

    channels: int
    height: int
    width: int

    def __post_init__(self):
        for field in ("channels", "height", "width"):
            v = getattr(self, field)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{field} must be a positive integer, got {v!r}")


@dataclass(frozen=True)
class PatchPlan:
    """Geometry of a patch grid over images of a fixed shape.

    grid_h and grid_w are the number of window positions per axis; the patch
    count is P = grid_h * grid_w and each patch vector has length
    d1 = channels * patch_side**2.
    """

    shape: ImageShape
    patch_side: int
    stride: int
    pad: int
    grid_h: int
    grid_w: int

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.shape.channels * self.patch_side ** 2


def plan_patches(shape: ImageShape, patch_side: int, stride: int = 1,
                 pad: int = 0) -> PatchPlan:
    """Build a PatchPlan for `shape`.

    Raises
    ------
    ValueError
        If the window does not fit inside the padded image, or any
        parameter is out of range.
    """
    if patch_side < 1:
        raise ValueError(f"patch_side must be >= 1, got {patch_side}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    eff_h = shape.height + 2 * pad
    eff_w = shape.width + 2 * pad
    if patch_side > eff_h or patch_side > eff_w:
        raise ValueError(
            f"patch_side {patch_side} exceeds padded image extent "
            f"({eff_h} x {eff_w})"
        )
    grid_h = (eff_h - patch_side) // stride + 1
    grid_w = (eff_w - patch_side) // stride + 1
    return PatchPlan(shape, patch_side, stride, pad, grid_h, grid_w)


def extract_patches_batch(images, plan: PatchPlan) -> np.ndarray:
    """Extract all patches from a stack of images.

    Parameters
    ----------
    images : array, shape (n, channels, height, width)
    plan : PatchPlan

    Returns
    -------
    array, shape (n, P, d1)
        Patch p of image i in row-major grid order; each row is the
        channel-major flattened window. Padded positions are zero.
    """
    X = np.asarray(images)
    if X.ndim != 4:
        raise ValueError(f"images must be 4-D, got shape {X.shape}")
    n, c, h, w = X.shape
    s = plan.shape
    if (c, h, w) != (s.channels, s.height, s.width):
        raise ValueError(
            f"images have shape {(c, h, w)}, plan expects "
            f"{(s.channels, s.height, s.width)}"
        )
    if plan.pad:
        p = plan.pad
        X = np.pad(X, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(X, (plan.patch_side, plan.patch_side), axis=(2, 3))
    win = win[:, :, ::plan.stride, ::plan.stride]
    out = win.transpose(0, 2, 3, 1, 4, 5)
    return np.ascontiguousarray(out).reshape(n, plan.n_patches, plan.patch_dim)


def extract_patches(image, plan: PatchPlan) -> np.ndarray:
    """Extract the (P, d1) patch matrix of a single (C, h, w) image."""
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise ValueError(f"image must be 3-D, got shape {arr.shape}")
    return extract_patches_batch(arr[None], plan)[0]


@dataclass(frozen=True)
class PoolPlan:
    """Average pooling over a patch grid as a sparse linear map.

    matrix is (P', P) in CSR form; row p' holds weight 1/|window| on every
    grid position inside pooled window p'. Windows that run off the grid
    edge average over their actual members only, so every row sums to 1.
    """

    pool_side: int
    pool_stride: int
    grid_h: int
    grid_w: int
    pooled_h: int
    pooled_w: int
    matrix: sparse.csr_matrix

    @property
    def n_pooled(self) -> int:
        return self.pooled_h * self.pooled_w


def build_pool_matrix(plan: PatchPlan, pool_side: int,
                      pool_stride: int) -> PoolPlan:
    """Build the pooling map for `plan`'s grid.

    Window origins step by pool_stride from grid position 0; each window
    covers pool_side x pool_side grid positions clipped to the grid.
    pool_side = pool_stride = 1 gives the identity map.
    """
    if pool_side < 1:
        raise ValueError(f"pool_side must be >= 1, got {pool_side}")
    if pool_stride < 1:
        raise ValueError(f"pool_stride must be >= 1, got {pool_stride}")
    gh, gw = plan.grid_h, plan.grid_w
    starts_r = range(0, gh, pool_stride)
    starts_c = range(0, gw, pool_stride)
    pooled_h, pooled_w = len(starts_r), len(starts_c)
    rows, cols, vals = [], [], []
    out_idx = 0
    for sr in starts_r:
        rr = range(sr, min(sr + pool_side, gh))
        for sc in starts_c:
            cc = range(sc, min(sc + pool_side, gw))
            members = [r * gw + c for r in rr for c in cc]
            wgt = 1.0 / len(members)
            rows.extend([out_idx] * len(members))
            cols.extend(members)
            vals.extend([wgt] * len(members))
            out_idx += 1
    G = sparse.csr_matrix(
        (np.asarray(vals), (np.asarray(rows), np.asarray(cols))),
        shape=(pooled_h * pooled_w, gh * gw),
    )
    return PoolPlan(pool_side, pool_stride, gh, gw, pooled_h, pooled_w, G)


def apply_pool(pool: PoolPlan, Z) -> np.ndarray:
    """Apply the pooling map to per-patch rows.

    Z may be (P, k) for one image or (n, P, k) for a stack; the pooled
    result replaces axis P with P'.
    """
    Z = np.asarray(Z)
    if Z.ndim == 2:
        if Z.shape[0] != pool.matrix.shape[1]:
            raise ValueError(
                f"Z has {Z.shape[0]} rows, pooling expects {pool.matrix.shape[1]}"
            )
        return np.asarray(pool.matrix @ Z)
    if Z.ndim == 3:
        n, P, k = Z.shape
        if P != pool.matrix.shape[1]:
            raise ValueError(
                f"Z has {P} patch rows, pooling expects {pool.matrix.shape[1]}"
            )
        flat = Z.transpose(1, 0, 2).reshape(P, n * k)
        pooled = np.asarray(pool.matrix @ flat)
        return pooled.reshape(pool.n_pooled, n, k).transpose(1, 0, 2)
    raise ValueError(f"Z must be 2-D or 3-D, got shape {Z.shape}")
