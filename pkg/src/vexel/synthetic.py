"""Bundled piecewise-constant test images.

Every image uses at most 8 flat colours and every feature is at least 8 px
across, so the vectorizer is expected to reconstruct them closely.
"""

import numpy as np

PALETTE = np.array(
    [
        [0.95, 0.92, 0.85],
        [0.85, 0.20, 0.15],
        [0.15, 0.45, 0.80],
        [0.20, 0.65, 0.30],
        [0.95, 0.75, 0.10],
        [0.45, 0.25, 0.55],
        [0.10, 0.10, 0.12],
        [0.55, 0.80, 0.85],
    ]
)


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    return xx, yy


def _canvas(size, color):
    img = np.empty((size, size, 3))
    img[:] = PALETTE[color]
    return img


def bisected(size=64):
    img = _canvas(size, 0)
    img[:, size // 2:] = PALETTE[2]
    return img


def quadrants(size=64):
    img = _canvas(size, 1)
    h = size // 2
    img[:h, h:] = PALETTE[2]
    img[h:, :h] = PALETTE[3]
    img[h:, h:] = PALETTE[4]
    return img


def disk(size=64):
    xx, yy = _grid(size)
    img = _canvas(size, 0)
    img[(xx - size / 2) ** 2 + (yy - size / 2) ** 2 < (size * 0.3) ** 2] = PALETTE[1]
    return img


def scattered(size=96):
    xx, yy = _grid(size)
    img = _canvas(size, 0)
    img[(xx - 22) ** 2 + (yy - 22) ** 2 < 12**2] = PALETTE[1]
    img[(np.abs(xx - 70) < 14) & (np.abs(yy - 24) < 10)] = PALETTE[2]
    img[np.abs(xx - 24) + np.abs(yy - 70) < 15] = PALETTE[3]
    img[((xx - 70) / 16) ** 2 + ((yy - 70) / 11) ** 2 < 1] = PALETTE[5]
    return img


def rings(size=96):
    xx, yy = _grid(size)
    r = np.hypot(xx - size / 2, yy - size / 2)
    img = _canvas(size, 0)
    img[r < 40] = PALETTE[2]
    img[r < 30] = PALETTE[4]
    img[r < 20] = PALETTE[1]
    img[r < 10] = PALETTE[6]
    return img


def stripes(size=64):
    img = np.empty((size, size, 3))
    for i in range(size):
        img[i] = PALETTE[(i // 8) % 8]
    return img


def wedge(size=64):
    xx, yy = _grid(size)
    img = _canvas(size, 7)
    img[yy > 0.6 * xx + 12] = PALETTE[5]
    img[(xx - 44) ** 2 + (yy - 18) ** 2 < 9**2] = PALETTE[4]
    return img


def triangle_ellipse(size=96):
    xx, yy = _grid(size)
    img = _canvas(size, 0)
    tri = (yy > 10) & (yy < 50) & (np.abs(xx - 30) < (yy - 10) * 0.55)
    img[tri] = PALETTE[3]
    img[((xx - 64) / 22) ** 2 + ((yy - 66) / 14) ** 2 < 1] = PALETTE[2]
    img[((xx - 64) / 10) ** 2 + ((yy - 66) / 6) ** 2 < 1] = PALETTE[6]
    return img


SUITE = {
    "bisected": bisected,
    "quadrants": quadrants,
    "disk": disk,
    "scattered": scattered,
    "rings": rings,
    "stripes": stripes,
    "wedge": wedge,
    "triangle_ellipse": triangle_ellipse,
}


def suite():
    """``{name: image}`` for every bundled test image."""
    return {name: fn() for name, fn in SUITE.items()}


def three_region_fixture(size=64):
    """Small 3-colour scene used by the end-to-end optimisation check."""
    xx, yy = _grid(size)
    img = _canvas(size, 7)
    img[yy > 40] = PALETTE[3]
    img[(xx - 30) ** 2 + (yy - 26) ** 2 < 13**2] = PALETTE[1]
    return img


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)
