"""Brain-tissue extraction (Otsu + closing) and binary morphology."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import DomainError

N_BINS = 256

DISK5 = np.array(
    [
        [0, 1, 1, 1, 0],
        [1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1],
        [0, 1, 1, 1, 0],
    ],
    dtype=bool,
)


def disk(radius: int) -> np.ndarray:
    """Disk footprint ``x**2 + y**2 <= (radius + 0.5)**2``; ``disk(2)`` is :data:`DISK5`."""
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= (r + 0.5) ** 2


def _histogram(x):
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or not np.all(np.isfinite(x)):
        raise DomainError("otsu needs a non-empty finite image")
    if x.min() < 0 or x.max() > 1:
        raise DomainError("otsu expects values in [0, 1]")
    idx = np.minimum((x * N_BINS).astype(np.int64), N_BINS - 1)
    return np.bincount(idx.ravel(), minlength=N_BINS)


def between_class_variance(counts) -> np.ndarray:
    """Between-class variance for every split ``[0, k) | [k, 256)``, k = 1..255.

    Returns an array of length 255 indexed by ``k - 1``.
    """
    counts = np.asarray(counts, dtype=np.float64)
    centers = (np.arange(N_BINS) + 0.5) / N_BINS
    total = counts.sum()
    w0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(counts * centers)[:-1]
    w1 = total - w0
    s1 = (counts * centers).sum() - s0
    with np.errstate(invalid="ignore", divide="ignore"):
        mu0 = np.where(w0 > 0, s0 / w0, 0.0)
        mu1 = np.where(w1 > 0, s1 / w1, 0.0)
    var = (w0 / total) * (w1 / total) * (mu0 - mu1) ** 2
    var[(w0 == 0) | (w1 == 0)] = -1.0
    return var


def otsu_threshold(x) -> float:
    """Otsu threshold over a 256-bin histogram of ``x`` in [0, 1].

    Splits that leave one class empty are skipped; among splits whose
    variance is within a relative 1e-9 of the maximum the lowest is kept. Cut positions falling in the same run of
    empty bins give the same partition, so the returned value is placed
    midway between the last occupied bin below the cut and the first
    occupied bin above it.
    """
    counts = _histogram(x)
    occupied = np.flatnonzero(counts)
    if occupied.size < 2:
        raise DomainError("degenerate histogram: image is constant")
    var = between_class_variance(counts)
    k = int(np.flatnonzero(var >= var.max() * (1 - 1e-9))[0]) + 1
    lo = occupied[occupied < k].max()
    hi = occupied[occupied >= k].min()
    return float((lo + hi + 1) / (2 * N_BINS))


def dilate(mask, footprint=DISK5) -> np.ndarray:
    return ndimage.binary_dilation(np.asarray(mask, bool), structure=footprint, border_value=0)


def erode(mask, radius: int = 2, footprint=None, border_value: int = 0) -> np.ndarray:
    """Binary erosion; pixels outside the grid count as background by default."""
    fp = disk(radius) if footprint is None else footprint
    return ndimage.binary_erosion(np.asarray(mask, bool), structure=fp, border_value=border_value)


def close(mask, footprint=DISK5) -> np.ndarray:
    """Closing = erosion of the dilation.

    The erosion treats out-of-grid pixels as foreground so that closing
    stays extensive for masks touching the border.
    """
    return erode(dilate(mask, footprint), footprint=footprint, border_value=1)


def brain_mask(x) -> np.ndarray:
    """Tissue mask: ``x > otsu(x)`` followed by closing with the 5x5 disk."""
    x = np.asarray(x)
    tau = otsu_threshold(x)
    return close(x > tau, DISK5)


def erosion_radius(height: int) -> int:
    """Radius used for the 'slight' erosion of residual maps: 2 at 64 px, round(2H/224) otherwise."""
    if height == 64:
        return 2
    return max(1, int(round(2 * height / 224)))
