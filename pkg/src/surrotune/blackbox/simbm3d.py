"""A miniature block-matching / 3-D transform denoiser with five knobs.

Pipeline:

1. block matching on the luminance (R+G+B)/3, shared by all channels: every
   reference block (``n1`` x ``n1``, stride ``n1/2``)
   collects the 8 most similar blocks (sum of squared differences) inside a
   window of radius ``neighborhood``; the reference always leads its group,
   ties go to the earlier block in row-major scan order;
2. per channel of the working space (RGB, or opponent when ``cspace=1``):
   orthonormal 2-D DCT per block, orthonormal length-8 Haar across the group;
3. hard thresholding at ``cff / 100`` (the group DC is always kept);
4. inverse transforms, uniform-weight aggregation of overlapping estimates;
5. optionally (``wtransform=1``) a second, Wiener-shrinkage pass on the same
   groups using the first-pass result as pilot.

The function is pure; block-matching results are memoised on the image bytes.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct

from .space import ParamSpace, bm3d_space, validate

GROUP_SIZE = 8
_MATCH_CACHE_SIZE = 512
_match_cache: "OrderedDict[tuple, tuple]" = OrderedDict()


def _dct_matrix(n: int) -> np.ndarray:
    return dct(np.eye(n), axis=0, norm="ortho")


def _haar_matrix(n: int) -> np.ndarray:
    """Orthonormal Haar matrix for power-of-two ``n`` (rows are basis vectors)."""
    h = np.array([[1.0]])
    while h.shape[0] < n:
        top = np.kron(h, [1.0, 1.0])
        bottom = np.kron(np.eye(h.shape[0]), [1.0, -1.0])
        h = np.vstack([top, bottom]) / np.sqrt(2.0)
    return h


_HAAR = _haar_matrix(GROUP_SIZE)


def to_opponent(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    return np.stack([(r + g + b) / 3.0, (r - b) / 2.0, (r - 2.0 * g + b) / 4.0], axis=-1)


def from_opponent(yuv: np.ndarray) -> np.ndarray:
    y, u, v = yuv[..., 0], yuv[..., 1], yuv[..., 2]
    rb = y + 2.0 * v / 3.0
    return np.stack([rb + u, y - 4.0 * v / 3.0, rb - u], axis=-1)


def _ref_positions(extent: int, n1: int) -> np.ndarray:
    step = max(n1 // 2, 1)
    pos = list(range(0, extent - n1 + 1, step))
    if pos[-1] != extent - n1:
        pos.append(extent - n1)
    return np.array(pos)


def _box_sums(sq: np.ndarray, starts: np.ndarray, n1: int, axis: int) -> np.ndarray:
    """Sums of ``n1`` consecutive slices along ``axis`` beginning at each of ``starts``."""
    s = n1 // 2
    a = np.moveaxis(sq, axis, 0)
    k = a.shape[0] // s
    strips = a[0:k * s:s].copy()
    for off in range(1, s):
        strips += a[off:k * s:s]
    aligned = starts[starts % s == 0] // s
    out = strips[aligned] + strips[aligned + 1]
    extra = [a[y:y + n1].sum(axis=0, keepdims=True) for y in starts[starts % s != 0]]
    if extra:
        out = np.concatenate([out] + extra, axis=0)
    return np.moveaxis(out, 0, axis)


def match_blocks(guide: np.ndarray, n1: int, radius: int):
    """Group coordinates for every reference block: two (R, 8) int arrays."""
    key = (hashlib.sha1(guide.tobytes()).hexdigest(), guide.shape, n1, radius)
    hit = _match_cache.get(key)
    if hit is not None:
        _match_cache.move_to_end(key)
        return hit

    h, w = guide.shape
    ry, rx = _ref_positions(h, n1), _ref_positions(w, n1)
    side = 2 * radius + 1
    x = guide.astype(np.float32)
    padded = np.pad(x, radius)  # out-of-image candidates are masked below
    shifted = sliding_window_view(padded, (side, side))[:h, :w]  # (H, W, side, side)
    sq = np.subtract(x[:, :, None, None], shifted).reshape(h, w, side * side)
    np.square(sq, out=sq)
    ssd = _box_sums(_box_sums(sq, ry, n1, 0), rx, n1, 1)  # (Ry, Rx, side*side)

    dy = np.repeat(np.arange(-radius, radius + 1), side)
    dx = np.tile(np.arange(-radius, radius + 1), side)
    grid = (len(ry), len(rx), side * side)
    cy = np.broadcast_to(ry[:, None, None] + dy, grid)
    cx = np.broadcast_to(rx[None, :, None] + dx, grid)
    valid = (cy >= 0) & (cy <= h - n1) & (cx >= 0) & (cx <= w - n1)
    ssd = np.where(valid, ssd, np.float32(np.inf)).reshape(-1, side * side)
    # non-negative float32 bit patterns order like the floats; the low bits
    # carry the scan index so argpartition is tie-stable
    keys = (ssd.view(np.int32).astype(np.int64) << 20) | np.arange(side * side)
    keys[:, (side * side) // 2] = -1  # reference block leads
    part = np.argpartition(keys, GROUP_SIZE - 1, axis=1)[:, :GROUP_SIZE]
    order = np.take_along_axis(keys, part, axis=1).argsort(axis=1)
    sel = np.take_along_axis(part, order, axis=1)
    if not np.isfinite(np.take_along_axis(ssd, sel, axis=1)).all():
        raise ValueError("image too small for block geometry")
    rows = np.take_along_axis(cy.reshape(-1, side * side), sel, axis=1)
    cols = np.take_along_axis(cx.reshape(-1, side * side), sel, axis=1)

    result = (rows, cols)
    _match_cache[key] = result
    if len(_match_cache) > _MATCH_CACHE_SIZE:
        _match_cache.popitem(last=False)
    return result


def _block_transform(n1: int) -> np.ndarray:
    """2-D orthonormal DCT acting on row-major flattened n1 x n1 blocks."""
    t = _BLOCK_DCT.get(n1)
    if t is None:
        d = _dct_matrix(n1)
        t = _BLOCK_DCT[n1] = np.kron(d, d)
    return t


_BLOCK_DCT: dict = {}


def _forward3d(groups: np.ndarray, n1: int) -> np.ndarray:
    """(N, 8, n1*n1) spatial groups -> coefficients; [:, 0, 0] is the group DC."""
    z = groups @ _block_transform(n1).T
    return np.einsum("gk,nkp->ngp", _HAAR, z, optimize=True)


def _inverse3d(coef: np.ndarray, n1: int) -> np.ndarray:
    z = np.einsum("kg,nkp->ngp", _HAAR, coef, optimize=True)
    return z @ _block_transform(n1)


def _aggregate(est: np.ndarray, flat: np.ndarray, size: int) -> np.ndarray:
    acc = np.bincount(flat.ravel(), weights=est.ravel(), minlength=size)
    cnt = np.bincount(flat.ravel(), minlength=size)
    return acc / cnt


def _collaborative(work: np.ndarray, rows, cols, n1: int, thr: float, wiener: bool) -> np.ndarray:
    h, w, c = work.shape
    planes = np.ascontiguousarray(np.moveaxis(work, 2, 0))  # (C, H, W)
    a = np.arange(n1)
    pix = ((rows[:, :, None, None] + a[:, None]) * w + cols[:, :, None, None] + a).reshape(len(rows), -1)
    flat = (pix[None] + (np.arange(c) * h * w)[:, None, None]).reshape(-1, pix.shape[1])

    def groups(img):
        return img.reshape(-1)[flat].reshape(len(flat), GROUP_SIZE, n1 * n1)

    coef = _forward3d(groups(planes), n1)
    keep = np.abs(coef) > thr
    keep[:, 0, 0] = True
    basic = _aggregate(_inverse3d(coef * keep, n1), flat, c * h * w)
    if wiener:
        pilot = _forward3d(groups(basic), n1)
        p2 = pilot * pilot
        shrink = p2 / (p2 + thr * thr)
        shrink[:, 0, 0] = 1.0
        basic = _aggregate(_inverse3d(coef * shrink, n1), flat, c * h * w)
    return np.moveaxis(basic.reshape(c, h, w), 0, 2)


def sim_bm3d(image: np.ndarray, params) -> np.ndarray:
    """Denoise an H x W x 3 image in [0, 1] with (cff, n1, cspace, wtransform, neighborhood)."""
    cff, n1, cspace, wtransform, radius = validate(tuple(params), bm3d_space())
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {img.shape}")
    h, w, _ = img.shape
    n1, radius = int(n1), int(radius)
    if h < n1 + 3 or w < n1 + 3:
        raise ValueError(f"image too small for block geometry: {h}x{w} with n1={n1}")
    work = img.astype(np.float64)
    rows, cols = match_blocks(work.mean(axis=2), n1, radius)
    if cspace:
        work = to_opponent(work)
    thr = float(cff) / 100.0
    out = _collaborative(work, rows, cols, n1, thr, bool(wtransform))
    if cspace:
        out = from_opponent(out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


class SimBM3D:
    """Built-in black box exposing the five-parameter denoiser."""

    name = "sim-bm3d"

    def __init__(self):
        self.space: ParamSpace = bm3d_space()

    def evaluate(self, image: np.ndarray, params) -> np.ndarray:
        return sim_bm3d(image, params)

    def close(self):
        pass
