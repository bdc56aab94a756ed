"""Canny edge detector used to build the edge-conditioning channel.

All stages work on ``H x W`` float arrays.  Pixel coordinates follow the
array layout: x runs along columns, y runs down the rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imagecore import ShapeError, as_image

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T

# (dy, dx) step along the quantized gradient direction.
_DIRECTION_STEPS = ((0, 1), (1, 1), (1, 0), (1, -1))


@dataclass(frozen=True)
class CannyParams:
    gaussian_sigma: float = 1.4
    low_threshold: float = 0.1
    high_threshold: float = 0.2

    def __post_init__(self):
        if not self.gaussian_sigma > 0:
            raise ValueError(f"gaussian_sigma must be > 0, got {self.gaussian_sigma}")
        if not 0.0 < self.low_threshold < self.high_threshold < 1.0:
            raise ValueError(
                "thresholds must satisfy 0 < low < high < 1, got "
                f"low={self.low_threshold}, high={self.high_threshold}"
            )


def to_gray(image) -> np.ndarray:
    """BT.601 luminance of an RGB(A) image; single-channel input passes through."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    arr = as_image(arr, check_side=False)
    if arr.shape[2] == 1:
        return arr[..., 0]
    r, g, b = (arr[..., i] for i in range(3))
    return LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b


def _as_gray2d(gray) -> np.ndarray:
    arr = np.asarray(gray, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise ShapeError(f"expected a single-channel image, got shape {arr.shape}")
    return arr


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _correlate_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="reflect")
    n = arr.shape[axis]
    out = np.zeros_like(arr)
    for offset, weight in enumerate(kernel):
        out += weight * np.take(padded, np.arange(offset, offset + n), axis=axis)
    return out


def gaussian_smooth(gray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3 sigma), reflective borders."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    arr = _as_gray2d(gray)
    k = gaussian_kernel1d(sigma)
    return _correlate_axis(_correlate_axis(arr, k, 0), k, 1)


def _correlate3x3(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    padded = np.pad(arr, 1, mode="reflect")
    h, w = arr.shape
    out = np.zeros_like(arr)
    for dy in range(3):
        for dx in range(3):
            if kernel[dy, dx]:
                out += kernel[dy, dx] * padded[dy : dy + h, dx : dx + w]
    return out


def sobel_components(gray) -> tuple[np.ndarray, np.ndarray]:
    arr = _as_gray2d(gray)
    return _correlate3x3(arr, _SOBEL_X), _correlate3x3(arr, _SOBEL_Y)


def sobel_gradients(gray) -> tuple[np.ndarray, np.ndarray]:
    """Return (magnitude, orientation in radians) from 3x3 Sobel derivatives."""
    gx, gy = sobel_components(gray)
    return np.hypot(gx, gy), np.arctan2(gy, gx)


def quantize_orientation(orientation: np.ndarray) -> np.ndarray:
    """Map angles to direction bins 0..3 (0, 45, 90, 135 degrees)."""
    angle = np.mod(orientation, np.pi)
    return (np.round(angle / (np.pi / 4)).astype(np.int64)) % 4


def _shifted(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[y, x] = arr[y + dy, x + dx], zero outside the image."""
    h, w = arr.shape
    padded = np.pad(arr, 1, mode="constant")
    return padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]


def non_maximum_suppression(magnitude: np.ndarray, orientation: np.ndarray) -> np.ndarray:
    """Keep ridge pixels along the gradient; returns the suppressed magnitude.

    A pixel survives when it is >= its forward neighbour and > its backward
    neighbour, so a two-pixel plateau straddling a step keeps exactly one.
    """
    bins = quantize_orientation(orientation)
    # Symmetric plateaus differ only by float noise; compare on a fixed grid.
    ridge = np.round(magnitude, 10)
    keep = np.zeros(magnitude.shape, dtype=bool)
    for b, (dy, dx) in enumerate(_DIRECTION_STEPS):
        forward = _shifted(ridge, dy, dx)
        backward = _shifted(ridge, -dy, -dx)
        keep |= (bins == b) & (ridge >= forward) & (ridge > backward)
    return np.where(keep, magnitude, 0.0)


def hysteresis(suppressed: np.ndarray, low: float, high: float) -> np.ndarray:
    """Strong pixels plus every weak pixel 8-connected to one of them."""
    weak = suppressed >= low
    strong = weak & (suppressed >= high)
    out = np.zeros(suppressed.shape, dtype=bool)
    h, w = suppressed.shape
    stack = list(zip(*np.nonzero(strong)))
    for y, x in stack:
        out[y, x] = True
    while stack:
        y, x = stack.pop()
        for ny in range(max(y - 1, 0), min(y + 2, h)):
            for nx in range(max(x - 1, 0), min(x + 2, w)):
                if weak[ny, nx] and not out[ny, nx]:
                    out[ny, nx] = True
                    stack.append((ny, nx))
    return out


def canny(image, params: CannyParams | None = None) -> np.ndarray:
    """Binary ``H x W`` edge map (uint8) of an image in [0, 1].

    Thresholds are fractions of the largest gradient magnitude in the image.
    """
    params = params or CannyParams()
    gray = to_gray(image)
    smoothed = gaussian_smooth(gray, params.gaussian_sigma)
    magnitude, orientation = sobel_gradients(smoothed)
    peak = float(magnitude.max(initial=0.0))
    # Flat images only carry rounding noise in the gradient.
    if peak <= 1e-9:
        return np.zeros(gray.shape, dtype=np.uint8)
    suppressed = non_maximum_suppression(magnitude, orientation)
    edges = hysteresis(suppressed, params.low_threshold * peak, params.high_threshold * peak)
    return edges.astype(np.uint8)


def append_edge_channel(image, params: CannyParams | None = None) -> np.ndarray:
    """RGB image -> RGB + edge map as a fourth channel."""
    rgb = as_image(image, check_side=False)[..., :3]
    if rgb.shape[2] == 1:
        rgb = np.repeat(rgb, 3, axis=2)
    edges = canny(rgb, params).astype(np.float64)
    return np.concatenate([rgb, edges[..., None]], axis=2)
