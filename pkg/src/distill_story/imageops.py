"""Pixel-level preprocessing: center padding, range normalization, bilinear resize.

All functions take and return 2-D float numpy arrays (grayscale images).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DomainError


def pad_to_square(image: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Center-pad to max(H, W) x max(H, W) with a constant fill value.

    Odd remainders put the extra row/column at the bottom/right, so the
    content stays centered and its aspect ratio is untouched.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ContractError(f"pad_to_square expects a nonempty 2-D image, got shape {image.shape}")
    h, w = image.shape
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    out = np.full((side, side), float(fill), dtype=np.float64)
    out[top : top + h, left : left + w] = image
    return out


def normalize(image: np.ndarray, source_max: float) -> np.ndarray:
    """Map pixel values from [0, source_max] to [0, 1] by dividing through."""
    image = np.asarray(image, dtype=np.float64)
    if source_max <= 0:
        raise DomainError(f"normalize: source_max must be > 0, got {source_max}")
    if image.size and float(image.min()) < 0:
        raise DomainError(f"normalize: negative pixel value {image.min()}")
    if image.size and float(image.max()) > source_max:
        raise DomainError(
            f"normalize: pixel value {image.max()} exceeds source_max {source_max}"
        )
    return image / float(source_max)


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with the half-pixel-center convention.

    Source coordinate for output index i is (i + 0.5) * in/out - 0.5,
    clamped to the valid range; outputs are convex combinations of the
    four surrounding input pixels, so the value range never grows.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ContractError(f"bilinear_resize expects a 2-D image, got shape {image.shape}")
    in_h, in_w = image.shape
    if out_h < 1 or out_w < 1:
        raise DomainError(f"bilinear_resize: target size {out_h}x{out_w} must be positive")
    if (in_h, in_w) == (out_h, out_w):
        return image.copy()

    def src_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        return lo, hi, frac

    r0, r1, fr = src_coords(out_h, in_h)
    c0, c1, fc = src_coords(out_w, in_w)

    top = image[r0][:, c0] * (1 - fc) + image[r0][:, c1] * fc
    bot = image[r1][:, c0] * (1 - fc) + image[r1][:, c1] * fc
    return top * (1 - fr[:, None]) + bot * fr[:, None]


def resize(image: np.ndarray, target: int) -> np.ndarray:
    """Resize a square [0, 1] image to target x target via bilinear_resize."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ContractError(
            f"resize expects a square image (pad first), got shape {image.shape}"
        )
    if target < 1:
        raise DomainError(f"resize: target {target} must be positive")
    return bilinear_resize(image, target, target)
