"""Reconstruction quality metrics on images normalized to a dynamic range of 1."""

import numpy as np

from deqmd import Image
from deqmd.constants import PSNR_CAP_DB
from deqmd.errors import ShapeMismatchError
from scipy.ndimage import uniform_filter


def _pair(x: Image, ref: Image) -> tuple[np.ndarray, np.ndarray]:
    if x.shape != ref.shape:
        raise ShapeMismatchError(f'Cannot compare images of shapes {x.shape} and {ref.shape}')
    return x.data, ref.data


def mse(x: Image, ref: Image) -> float:
    a, b = _pair(x, ref)
    return float(np.mean((a - b) ** 2))


def psnr(x: Image, ref: Image) -> float:
    """``10 log10(1 / MSE)`` in dB with a peak of 1.0, capped at :py:data:`deqmd.constants.PSNR_CAP_DB` (which is also
    what identical images score).

    :raises ShapeMismatchError: If the shapes differ.
    """
    error = mse(x, ref)
    if error == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / error), PSNR_CAP_DB))


def ssim(x: Image, ref: Image, window: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over uniform ``window x window`` neighbourhoods, computed per channel and averaged.
    Local variances use the sample (``N - 1``) normalization, and the mean skips a border of ``(window - 1) // 2``
    pixels where the window hangs over the edge.

    :raises ShapeMismatchError: If the shapes differ or the image is smaller than the window.
    """

    a, b = _pair(x, ref)
    if min(x.height, x.width) < window:
        raise ShapeMismatchError(f'SSIM window {window} is larger than the {x.height}x{x.width} image')
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    n = window * window
    cov_norm = n / (n - 1)
    pad = (window - 1) // 2
    scores = []
    for channel in range(x.channels):
        p, q = a[:, :, channel], b[:, :, channel]
        mu_p = uniform_filter(p, size=window, mode='reflect')
        mu_q = uniform_filter(q, size=window, mode='reflect')
        var_p = cov_norm * (uniform_filter(p * p, size=window, mode='reflect') - mu_p * mu_p)
        var_q = cov_norm * (uniform_filter(q * q, size=window, mode='reflect') - mu_q * mu_q)
        cov = cov_norm * (uniform_filter(p * q, size=window, mode='reflect') - mu_p * mu_q)
        numerator = (2 * mu_p * mu_q + c1) * (2 * cov + c2)
        denominator = (mu_p * mu_p + mu_q * mu_q + c1) * (var_p + var_q + c2)
        local = numerator / denominator
        scores.append(local[pad : local.shape[0] - pad, pad : local.shape[1] - pad].mean())
    return float(np.mean(scores))
