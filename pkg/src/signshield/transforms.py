"""Input transformations used as defenses and as training augmentation.

All functions take channel-last float images in [0, 1] and return new
arrays of the same shape; none of them mutate their input.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError

DEFAULT_CROP_FRACTION = 0.94

# Standard JPEG luminance quantization table (ITU-T T.81, Annex K).
JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def resize_bilinear(x: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an ``H x W x C`` (or ``H x W``) image."""
    x = np.asarray(x)
    h, w = x.shape[:2]
    if (h, w) == (height, width):
        return x.copy()

    def axis(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, height)
    c0, c1, fc = axis(w, width)
    src = x.astype(np.float64)
    extra = (None,) * (x.ndim - 2)
    fr = fr[(slice(None), None) + extra]
    fc = fc[(None, slice(None)) + extra]
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bottom = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    return (top * (1 - fr) + bottom * fr).astype(x.dtype)


def crop_extent(side: int, fraction: float) -> int:
    if not 0 < fraction <= 1:
        raise ParameterError(f"crop fraction must be in (0, 1], got {fraction}")
    extent = int(np.floor(fraction * side))
    if extent < 1:
        raise ParameterError(f"crop fraction {fraction} leaves an empty crop of a {side}-pixel side")
    return extent


def random_crop_resize(x: np.ndarray, fraction: float, rng: np.random.Generator, offset=None) -> np.ndarray:
    """Crop a fixed-size window at a uniformly random position and resize it back.

    ``offset`` pins the top-left corner instead of drawing it from ``rng``.
    """
    h, w = x.shape[:2]
    ch, cw = crop_extent(h, fraction), crop_extent(w, fraction)
    if offset is None:
        offset = (int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)))
    r, c = offset
    if not (0 <= r <= h - ch and 0 <= c <= w - cw):
        raise ParameterError(f"crop offset {offset} puts a {ch}x{cw} window outside a {h}x{w} image")
    return resize_bilinear(x[r:r + ch, c:c + cw], h, w)


def bit_squeeze(x: np.ndarray, depth: int) -> np.ndarray:
    """Quantize each intensity to ``2**depth`` evenly spaced levels, rounding half up."""
    if not 1 <= int(depth) <= 8:
        raise ParameterError(f"bit depth must be in [1, 8], got {depth}")
    levels = 2 ** int(depth) - 1
    x = np.asarray(x)
    return (np.floor(x.astype(np.float64) * levels + 0.5) / levels).astype(x.dtype)


def binary_filter(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return (x >= 0.5).astype(x.dtype)


def quality_scale(quality: int) -> float:
    if not 1 <= quality <= 100:
        raise ParameterError(f"quality must be in [1, 100], got {quality}")
    return 5000.0 / quality if quality < 50 else 200.0 - 2 * quality


def quantization_table(quality: int) -> np.ndarray:
    scale = quality_scale(quality)
    return np.clip(np.floor(JPEG_LUMA_TABLE * scale / 100 + 0.5), 1, 255)


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II basis; row ``k`` is the k-th cosine."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos((2 * i + 1) * k * np.pi / (2 * n))
    m[0] /= np.sqrt(2.0)
    return m


def dct_quantize(x: np.ndarray, quality: int = 50) -> np.ndarray:
    """JPEG-style frequency suppression without the entropy coder.

    Each channel is shifted to [-128, 127], split into 8x8 blocks (edges
    padded by replication), DCT-transformed, quantized with the luminance
    table at ``quality``, reconstructed and clamped back to [0, 1].
    """
    table = quantization_table(quality)
    x = np.asarray(x)
    squeeze = x.ndim == 2
    img = x[..., None] if squeeze else x
    h, w, c = img.shape
    ph, pw = -h % 8, -w % 8
    work = np.pad(img.astype(np.float64) * 255.0 - 128.0, ((0, ph), (0, pw), (0, 0)), mode="edge")
    bh, bw = work.shape[0] // 8, work.shape[1] // 8
    # (bh, 8, bw, 8, c) -> (bh, bw, c, 8, 8)
    blocks = work.reshape(bh, 8, bw, 8, c).transpose(0, 2, 4, 1, 3)
    d = dct_matrix(8)
    coeffs = d @ blocks @ d.T
    coeffs = np.round(coeffs / table) * table
    # snap float round-off (~1e-13) so exact inputs such as all-black stay exact
    rec = np.round(d.T @ coeffs @ d, 6)
    rec = rec.transpose(0, 3, 1, 4, 2).reshape(bh * 8, bw * 8, c)[:h, :w]
    out = np.clip((rec + 128.0) / 255.0, 0.0, 1.0).astype(x.dtype)
    return out[..., 0] if squeeze else out
