"""Haar analysis of person images and high-frequency patch scoring.

Single-level orthonormal 2x2 Haar transform, the summed high-band map, its
projection onto the encoder's patch raster, and top-K selection of the most
textured patches. Everything here is parameter-free and gradient-free.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import instrumentation


@dataclass
class WaveletSubbands:
    """Orthonormal Haar subbands, each (H/2, W/2, C)."""
    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray


def _check_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected HxWxC image, got shape {img.shape}")
    h, w, _ = img.shape
    if h % 2 or w % 2:
        raise ValueError(f"image dims must be even, got {h}x{w}")
    return img


def haar_decompose(img):
    """One orthonormal Haar level over non-overlapping 2x2 blocks.

    For a block [[a, b], [c, d]] per channel:
    LL=(a+b+c+d)/2, LH=(a+b-c-d)/2, HL=(a-b+c-d)/2, HH=(a-b-c+d)/2.
    """
    instrumentation.bump("wavelet")
    img = _check_image(img)
    a = img[0::2, 0::2]
    b = img[0::2, 1::2]
    c = img[1::2, 0::2]
    d = img[1::2, 1::2]
    return WaveletSubbands(
        ll=(a + b + c + d) / 2.0,
        lh=(a + b - c - d) / 2.0,
        hl=(a - b + c - d) / 2.0,
        hh=(a - b - c + d) / 2.0,
    )


def haar_reconstruct(sb):
    """Exact inverse of haar_decompose."""
    instrumentation.bump("wavelet")
    shapes = {x.shape for x in (sb.ll, sb.lh, sb.hl, sb.hh)}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent subband shapes: {sorted(shapes)}")
    hh2, ww2, ch = sb.ll.shape
    img = np.empty((hh2 * 2, ww2 * 2, ch), dtype=np.float64)
    img[0::2, 0::2] = (sb.ll + sb.lh + sb.hl + sb.hh) / 2.0
    img[0::2, 1::2] = (sb.ll + sb.lh - sb.hl - sb.hh) / 2.0
    img[1::2, 0::2] = (sb.ll - sb.lh + sb.hl - sb.hh) / 2.0
    img[1::2, 1::2] = (sb.ll - sb.lh - sb.hl + sb.hh) / 2.0
    return img


def highfreq_map(sb):
    """Elementwise sum of the three high-frequency subbands."""
    return sb.lh + sb.hl + sb.hh


def bilinear_resize(grid, out_h, out_w):
    """Corner-aligned bilinear resampling of an (H, W, C) grid."""
    grid = np.asarray(grid, dtype=np.float64)
    in_h, in_w = grid.shape[:2]
    ys = np.linspace(0.0, in_h - 1.0, out_h) if out_h > 1 else np.array([(in_h - 1) / 2.0])
    xs = np.linspace(0.0, in_w - 1.0, out_w) if out_w > 1 else np.array([(in_w - 1) / 2.0])
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = grid[y0][:, x0] * (1 - wx) + grid[y0][:, x1] * wx
    bot = grid[y1][:, x0] * (1 - wx) + grid[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def project_to_patches(hf_map, rows, cols, patch=2):
    """Resample the high-band map onto a rows x cols patch raster and flatten.

    Each output vector covers one patch cell at `patch` x `patch` resolution,
    all channels. No trainable parameters.
    """
    if rows * cols == 0:
        raise ValueError("patch grid must be non-empty")
    resized = bilinear_resize(hf_map, rows * patch, cols * patch)
    ch = resized.shape[-1]
    cells = resized.reshape(rows, patch, cols, patch, ch).transpose(0, 2, 1, 3, 4)
    return cells.reshape(rows * cols, patch * patch * ch)


def hf_response(patch_vec):
    """l2 response of one flattened patch."""
    return float(np.sqrt(np.sum(np.asarray(patch_vec, dtype=np.float64) ** 2)))


def topk_select(scores, k):
    """Indices of the k largest scores, ties to the smaller index, ascending.

    Ascending output preserves the spatial order of the selected patches.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} scores")
    # stable sort on (-score, index) gives the smaller index on ties
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


def patch_scores(img, rows, cols):
    """High-frequency response per patch for an image: full scoring pipeline."""
    sb = haar_decompose(img)
    vecs = project_to_patches(highfreq_map(sb), rows, cols)
    return np.sqrt((vecs**2).sum(axis=1))
