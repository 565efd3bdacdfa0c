"""Mirror descent for Poisson inverse problems, with regularizers learned as deep equilibrium models. For an overview of
how the pieces fit together, read the :ref:`patterns` page.

This module holds the value types every other module passes around: :py:class:`Image`, :py:class:`Kernel` and
:py:class:`Seed`, plus a reader for environment flags.
"""

import numpy as np
import torch

from dataclasses import dataclass, field
from deqmd.constants import POSITIVITY_EPS
from deqmd.errors import CorruptDataError, DomainError, ShapeMismatchError
from os import environ


@dataclass(frozen=True, eq=False)
class Image:
    """A non-negative (by convention, not by enforcement) grid of 64-bit pixels with shape metadata. The pixel array is
    copied on construction and marked read-only, so an ``Image`` can be shared freely once built.

    :param data: Pixel values. A 2-D array is read as a single-channel image; a 3-D array is read as
        ``(height, width, channels)``.
    :type data: numpy.ndarray

    :raises CorruptDataError: If any pixel is NaN or infinite.
    :raises ShapeMismatchError: If the array is neither 2-D nor 3-D, or is empty.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.ndim != 3 or arr.size == 0:
            raise ShapeMismatchError(f'Images must be non-empty 2-D or 3-D arrays, got shape {arr.shape}')
        if not np.all(np.isfinite(arr)):
            raise CorruptDataError(f'Image contains {np.count_nonzero(~np.isfinite(arr))} non-finite pixel(s)')
        arr.setflags(write=False)
        object.__setattr__(self, 'data', arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        """``(height, width, channels)``"""
        return self.data.shape

    @property
    def size(self) -> int:
        """Total pixel count over all channels."""
        return self.data.size

    def like(self, data: np.ndarray) -> 'Image':
        """Builds a new image holding ``data``, which must have this image's shape."""
        data = np.asarray(data)
        if data.shape != self.shape and data.shape != self.shape[:2]:
            raise ShapeMismatchError(f'Expected shape {self.shape}, got {data.shape}')
        return Image(data.reshape(self.shape))

    def require_shape(self, shape: tuple) -> None:
        """Raises a :py:class:`ShapeMismatchError` unless this image has the given shape."""
        if tuple(shape) != self.shape:
            raise ShapeMismatchError(f'Expected an image of shape {tuple(shape)}, got {self.shape}')

    def tensor(self, requires_grad: bool = False) -> torch.Tensor:
        """Returns a float64 torch copy of the pixels, shaped ``(height, width, channels)``."""
        return torch.tensor(self.data, dtype=torch.float64, requires_grad=requires_grad)

    @classmethod
    def full(cls, shape: tuple, value: float) -> 'Image':
        """An image of the given shape with every pixel equal to ``value``."""
        return cls(np.full(shape, value, dtype=np.float64))

    def __repr__(self):
        return f'Image(shape={self.shape}, min={self.data.min():.4g}, max={self.data.max():.4g})'


@dataclass(frozen=True, eq=False)
class Kernel:
    """Weights of a blur kernel, together with the anchor pixel that lines up with the output pixel.

    :param weights: A 2-D array of non-negative weights with a positive sum.
    :type weights: numpy.ndarray

    :param anchor: ``(row, column)`` of the anchor within ``weights``. Defaults to the center,
        ``(rows // 2, cols // 2)``.
    :type anchor: tuple[int, int], optional

    :raises DomainError: If any weight is negative or the weights sum to zero.
    """

    weights: np.ndarray
    anchor: tuple[int, int] = field(default=None)

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64)
        if weights.ndim != 2 or weights.size == 0:
            raise ShapeMismatchError(f'Kernel weights must be a non-empty 2-D array, got shape {weights.shape}')
        if not np.all(np.isfinite(weights)):
            raise CorruptDataError('Kernel weights contain non-finite values')
        if np.any(weights < 0):
            raise DomainError('Kernel weights must be non-negative')
        if weights.sum() <= 0:
            raise DomainError('Kernel weights must have a positive sum')
        weights.setflags(write=False)
        anchor = self.anchor
        if anchor is None:
            anchor = (weights.shape[0] // 2, weights.shape[1] // 2)
        anchor = (int(anchor[0]), int(anchor[1]))
        if not (0 <= anchor[0] < weights.shape[0] and 0 <= anchor[1] < weights.shape[1]):
            raise DomainError(f'Kernel anchor {anchor} lies outside weights of shape {weights.shape}')
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'anchor', anchor)

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def taps(self):
        """Yields ``(weight, row_shift, col_shift)`` for every non-zero weight, shifts measured from the anchor."""
        for (row, col), weight in np.ndenumerate(self.weights):
            if weight != 0.0:
                yield weight, row - self.anchor[0], col - self.anchor[1]

    def is_symmetric(self) -> bool:
        """True when flipping the kernel about its anchor leaves it unchanged."""
        flipped = {(-dr, -dc): w for w, dr, dc in self.taps()}
        return flipped == {(dr, dc): w for w, dr, dc in self.taps()}


@dataclass(frozen=True)
class Seed:
    """Root of a deterministic random stream. Identical seeds reproduce identical streams bit-exactly.

    :param value: A 64-bit unsigned integer.
    :type value: int
    """

    value: int

    def __post_init__(self):
        if not 0 <= int(self.value) < 2**64:
            raise DomainError(f'Seeds must be 64-bit unsigned integers, got {self.value}')
        object.__setattr__(self, 'value', int(self.value))

    def generator(self) -> np.random.Generator:
        """A fresh numpy generator positioned at the start of this seed's stream."""
        return np.random.Generator(np.random.PCG64(self.value))

    def torch_generator(self) -> torch.Generator:
        """A fresh torch CPU generator seeded from this seed."""
        return torch.Generator().manual_seed(self.value)

    def derive(self, *keys: int) -> 'Seed':
        """Derives an independent child seed from this seed and a path of integer keys, so sub-tasks (one per image,
        one per epoch) get their own reproducible streams."""
        state = np.random.SeedSequence([self.value, *[int(k) for k in keys]]).generate_state(1, dtype=np.uint64)
        return Seed(int(state[0]))


def clamp_positive(x: Image, eps: float = POSITIVITY_EPS) -> Image:
    """Raises every pixel to at least ``eps``, keeping iterates inside the open positive orthant where Burg's entropy
    is defined. Idempotent.

    :param x: The image to clamp.
    :type x: Image

    :param eps: The positivity floor. Defaults to :py:data:`deqmd.constants.POSITIVITY_EPS`.
    :type eps: float, optional

    :raises DomainError: If ``eps`` is not strictly positive.
    :raises CorruptDataError: If ``x`` holds non-finite pixels.

    :return: A new image with the same shape.
    :rtype: Image
    """

    if not eps > 0:
        raise DomainError(f'eps must be positive, got {eps}')
    data = np.asarray(x.data if isinstance(x, Image) else x, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise CorruptDataError('Cannot clamp an image with non-finite pixels')
    return Image(np.maximum(data, eps))


TRUTHY_VALUES = frozenset({'t', 'true', 'yes', '1'})  #: Case-insensitive spellings of an enabled flag


def env_var_is_true(name: str) -> bool:
    """True when the environment variable ``name`` is set to one of :py:data:`TRUTHY_VALUES`. Unset means False."""
    return environ.get(name, '').strip().lower() in TRUTHY_VALUES


def progress_enabled() -> bool:
    """Progress bars are drawn unless ``DEQMD_NO_PROGRESS`` is set to a true value."""
    return not env_var_is_true('DEQMD_NO_PROGRESS')
