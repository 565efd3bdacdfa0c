"""Reading and writing images. Two families of formats are supported:

    - The lossless float format (``.deqf``): a 16-byte header (magic ``DEQF``, then little-endian ``u32`` height,
      width and channels) followed by the pixels as little-endian ``f64`` in ``(height, width, channels)`` C order.
    - Display formats (``.png``, ``.pgm``, ``.ppm``), read and written through Pillow as 8-bit data normalized to
      ``[0, 1]``.
"""

import logging
import numpy as np
import struct

from deqmd import Image
from deqmd.constants import FLOAT_IMAGE_MAGIC
from deqmd.errors import ImageFormatError, ShapeMismatchError
from pathlib import Path
from PIL import Image as PILImage


log = logging.getLogger(__name__)

FLOAT_SUFFIXES = {'.deqf'}  #: Suffixes saved losslessly
DISPLAY_SUFFIXES = {'.png', '.pgm', '.ppm'}  #: Suffixes saved as 8-bit data
_HEADER = struct.Struct('<4sIII')

#: ITU-R 601 luma weights, the same ones Pillow uses for its "L" conversion
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def load_image(path: str | Path, channels: int = None) -> Image:
    """Loads an image from disk.

    :param path: File to read. The format is chosen by suffix.
    :type path: str | pathlib.Path

    :param channels: Number of channels wanted. ``1`` converts color data to luminance. Defaults to None, which keeps
        the file's own channel count.
    :type channels: int, optional

    :raises ImageFormatError: For unknown suffixes or corrupt files.
    :raises ShapeMismatchError: If the requested channel count cannot be produced from the file.

    :return: The image, with display formats normalized to ``[0, 1]``.
    :rtype: deqmd.Image
    """

    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in FLOAT_SUFFIXES:
        data = _read_float(path)
    elif suffix in DISPLAY_SUFFIXES:
        with PILImage.open(path) as img:
            if img.mode not in ('L', 'RGB'):
                img = img.convert('RGB')
            data = np.asarray(img, dtype=np.float64) / 255.0
        if data.ndim == 2:
            data = data[:, :, np.newaxis]
    else:
        raise ImageFormatError(f'Unsupported image format "{suffix}" for {path}')

    if channels is not None and channels != data.shape[2]:
        if channels == 1 and data.shape[2] == 3:
            data = (data @ LUMA_WEIGHTS)[:, :, np.newaxis]
        else:
            raise ShapeMismatchError(f'Cannot produce {channels} channel(s) from a {data.shape[2]}-channel file')
    return Image(data)


def save_image(x: Image, path: str | Path) -> Path:
    """Writes an image to disk. The float format stores pixels exactly; display formats clip to ``[0, 1]`` and quantize
    to 8 bits.

    :param x: The image to write.
    :type x: deqmd.Image

    :param path: Destination. The format is chosen by suffix.
    :type path: str | pathlib.Path

    :raises ImageFormatError: For unknown suffixes, or channel counts a display format can't hold.

    :return: The path written.
    :rtype: pathlib.Path
    """

    path = Path(path)
    suffix = path.suffix.lower()
    path.parent.mkdir(parents=True, exist_ok=True)
    if suffix in FLOAT_SUFFIXES:
        header = _HEADER.pack(FLOAT_IMAGE_MAGIC, x.height, x.width, x.channels)
        path.write_bytes(header + x.data.astype('<f8').tobytes(order='C'))
    elif suffix in DISPLAY_SUFFIXES:
        if x.channels not in (1, 3):
            raise ImageFormatError(f'{suffix} files hold 1 or 3 channels, not {x.channels}')
        pixels = np.round(np.clip(x.data, 0.0, 1.0) * 255.0).astype(np.uint8)
        if x.channels == 1:
            PILImage.fromarray(pixels[:, :, 0], mode='L').save(path)
        else:
            PILImage.fromarray(pixels, mode='RGB').save(path)
    else:
        raise ImageFormatError(f'Unsupported image format "{suffix}" for {path}')
    log.debug(f'Wrote {x.shape} image to {path}')
    return path


def _read_float(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ImageFormatError(f'{path} is too short to hold a float image header')
    magic, height, width, channels = _HEADER.unpack_from(raw)
    if magic != FLOAT_IMAGE_MAGIC:
        raise ImageFormatError(f'{path} does not start with the {FLOAT_IMAGE_MAGIC!r} magic')
    expected = height * width * channels * 8
    if len(raw) - _HEADER.size != expected:
        raise ImageFormatError(
            f'{path} declares a {height}x{width}x{channels} image ({expected} bytes) but holds '
            f'{len(raw) - _HEADER.size} bytes of pixels'
        )
    return np.frombuffer(raw, dtype='<f8', offset=_HEADER.size).reshape(height, width, channels).astype(np.float64)
