"""
Deterministic image and map primitives.

Images are float arrays shaped C x H x W with values in [0, 1]; maps are 2-D
float arrays. Every function is pure and allocates its output.
"""
import math
from functools import lru_cache

import matplotlib
import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError

COLORMAP_NAME = "viridis"


def as_image(img: np.ndarray) -> np.ndarray:
    """Validate and return a C x H x W float64 copy"""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise InvalidArgumentError(f"image must be C x H x W, got shape {arr.shape}")
    return arr


def gaussian_kernel1d(ksize: int, sigma: float) -> np.ndarray:
    if ksize < 1 or ksize % 2 == 0:
        raise InvalidArgumentError(f"ksize must be a positive odd integer, got {ksize}")
    if sigma <= 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")
    radius = ksize // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def gaussian_blur2d(img: np.ndarray, ksize: int, sigma: float) -> np.ndarray:
    """
    Separable Gaussian blur applied to each channel.

    Borders are mirrored without repeating the edge pixel (d c b | a b c d ...).

    Args:
        img: C x H x W image
        ksize: Odd kernel size
        sigma: Standard deviation in pixels

    Returns:
        Blurred image with the same shape, clipped to [0, 1]
    """
    image = as_image(img)
    kernel = gaussian_kernel1d(ksize, sigma)
    if ksize == 1:
        return image.copy()
    out = ndimage.correlate1d(image, kernel, axis=1, mode="mirror")
    out = ndimage.correlate1d(out, kernel, axis=2, mode="mirror")
    return np.clip(out, 0.0, 1.0)


def _axis_weights(src_len: int, dst_len: int):
    scale = src_len / dst_len
    coords = (np.arange(dst_len, dtype=np.float64) + 0.5) * scale - 0.5
    coords = np.clip(coords, 0.0, src_len - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, src_len - 1)
    frac = coords - lo
    return lo, hi, frac


def bilinear_upsample(m: np.ndarray, height: int, width: int) -> np.ndarray:
    """
    Resample a 2-D map with half-pixel centres and no corner alignment.

    Source coordinate of output index i is (i + 0.5) * (h / H) - 0.5, clamped
    to [0, h - 1].
    """
    src = np.asarray(m, dtype=np.float64)
    if src.ndim != 2:
        raise InvalidArgumentError(f"map must be 2-D, got shape {src.shape}")
    if height < 1 or width < 1:
        raise InvalidArgumentError(f"target size must be positive, got {height}x{width}")
    if src.shape == (height, width):
        return src.copy()

    r0, r1, rf = _axis_weights(src.shape[0], height)
    c0, c1, cf = _axis_weights(src.shape[1], width)

    rows = src[r0, :] * (1.0 - rf)[:, None] + src[r1, :] * rf[:, None]
    out = rows[:, c0] * (1.0 - cf)[None, :] + rows[:, c1] * cf[None, :]
    # interpolation round-off must not leave the source range
    return np.clip(out, src.min(), src.max())


def minmax_normalize(m: np.ndarray) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def percentile(m: np.ndarray, theta: float) -> float:
    """Nearest-rank percentile over all pixels, zeros included"""
    if not 0.0 <= theta <= 100.0:
        raise InvalidArgumentError(f"theta must lie in [0, 100], got {theta}")
    flat = np.sort(np.asarray(m, dtype=np.float64), axis=None)
    if flat.size == 0:
        raise InvalidArgumentError("percentile of an empty map")
    rank = math.ceil(theta * flat.size / 100.0)
    return float(flat[max(rank - 1, 0)])


def denoise(m: np.ndarray, theta: float) -> np.ndarray:
    """Zero every pixel not strictly above the theta-th percentile"""
    arr = np.asarray(m, dtype=np.float64)
    threshold = percentile(arr, theta)
    return np.where(arr > threshold, arr, 0.0)


def blend(original: np.ndarray, baseline: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-pixel original * mask + baseline * (1 - mask), mask broadcast over channels"""
    a = as_image(original)
    b = as_image(baseline)
    weights = np.asarray(mask, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"original {a.shape} and baseline {b.shape} differ")
    if weights.shape != a.shape[1:]:
        raise InvalidArgumentError(f"mask {weights.shape} does not match image {a.shape[1:]}")
    return a * weights[None, :, :] + b * (1.0 - weights[None, :, :])


@lru_cache(maxsize=1)
def colormap_table() -> np.ndarray:
    """The fixed 256 x 3 lookup table used for every overlay"""
    cmap = matplotlib.colormaps[COLORMAP_NAME]
    table = np.asarray(cmap.colors, dtype=np.float64)[:, :3]
    table.setflags(write=False)
    return table


def colormap_lookup(sal: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to a 3 x H x W RGB image"""
    values = np.clip(np.asarray(sal, dtype=np.float64), 0.0, 1.0)
    index = np.floor(values * 255.0 + 0.5).astype(np.int64)
    return np.transpose(colormap_table()[index], (2, 0, 1))


def colormap_overlay(img: np.ndarray, sal: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    image = as_image(img)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    values = np.asarray(sal, dtype=np.float64)
    if values.shape != image.shape[1:]:
        raise InvalidArgumentError(f"saliency {values.shape} does not match image {image.shape[1:]}")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgumentError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * image[:3] + alpha * colormap_lookup(values)
