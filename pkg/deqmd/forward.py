"""The measurement process: a blur operator ``A`` with its adjoint, and the Poisson channel ``y ~ Poiss(alpha * A x)``.

Convolution uses circular boundaries only. That keeps ``A`` square with an exact adjoint. The direct spatial sum is the
reference implementation; the FFT path must agree with it to 1e-10.
"""

import csv
import logging
import numpy as np
import torch

from dataclasses import dataclass, field
from deqmd import Image, Kernel, Seed
from deqmd.constants import GAUSSIAN_KERNEL_SIGMA, GAUSSIAN_KERNEL_SIZE, UNIFORM_KERNEL_SIZE
from deqmd.errors import DomainError, ImageFormatError, ShapeMismatchError
from deqmd.imagefiles import load_image, save_image
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Callable


log = logging.getLogger(__name__)

#: Kernel names that can be loaded without a path
BUILTIN_KERNEL_FILES = {'motion': 'motion.txt'}


def gaussian_kernel(size: int = GAUSSIAN_KERNEL_SIZE, sigma: float = GAUSSIAN_KERNEL_SIGMA) -> Kernel:
    """A normalized, centered ``size`` x ``size`` Gaussian kernel."""
    if size < 1 or sigma <= 0:
        raise DomainError(f'Gaussian kernels need size >= 1 and sigma > 0, got {size} and {sigma}')
    offsets = np.arange(size) - size // 2
    rows, cols = np.meshgrid(offsets, offsets, indexing='ij')
    weights = np.exp(-(rows**2 + cols**2) / (2.0 * sigma**2))
    return Kernel(weights / weights.sum())


def uniform_kernel(size: int = UNIFORM_KERNEL_SIZE) -> Kernel:
    """A normalized, centered ``size`` x ``size`` box kernel."""
    if size < 1:
        raise DomainError(f'Uniform kernels need size >= 1, got {size}')
    return Kernel(np.full((size, size), 1.0 / size**2))


def delta_kernel() -> Kernel:
    """The identity kernel."""
    return Kernel(np.ones((1, 1)))


def load_kernel(path: str | Path) -> Kernel:
    """Reads a kernel text file. The first line holds ``h w anchor_r anchor_c``; ``h`` rows of ``w`` floats follow.
    The names in :py:data:`BUILTIN_KERNEL_FILES` (such as ``motion``) load the kernels shipped with the package.

    :raises ImageFormatError: If the file is malformed.
    """

    if str(path) in BUILTIN_KERNEL_FILES:
        text = resources.files('deqmd').joinpath('kernels', BUILTIN_KERNEL_FILES[str(path)]).read_text()
    else:
        text = Path(path).read_text()
    lines = [line for line in text.splitlines() if line.strip() and not line.lstrip().startswith('#')]
    try:
        height, width, anchor_r, anchor_c = (int(tok) for tok in lines[0].split())
        rows = [[float(tok) for tok in line.split()] for line in lines[1:]]
    except (IndexError, ValueError) as ex:
        raise ImageFormatError(f'Malformed kernel file {path}: {ex}') from ex
    if len(rows) != height or any(len(row) != width for row in rows):
        raise ImageFormatError(f'Kernel file {path} declares {height}x{width} weights but holds a different grid')
    return Kernel(np.array(rows), anchor=(anchor_r, anchor_c))


def save_kernel(kernel: Kernel, path: str | Path) -> Path:
    """Writes ``kernel`` in the kernel text format."""
    path = Path(path)
    height, width = kernel.weights.shape
    lines = [f'{height} {width} {kernel.anchor[0]} {kernel.anchor[1]}']
    lines.extend(' '.join(repr(float(w)) for w in row) for row in kernel.weights)
    path.write_text('\n'.join(lines) + '\n')
    return path


def kernel_from_spec(kind: str, size: int = None, sigma: float = None, path: str = None) -> Kernel:
    """Builds a kernel from the fields of an experiment configuration.

    :param kind: One of ``gaussian``, ``uniform``, ``delta`` or ``file``.
    :type kind: str
    """

    match kind:
        case 'gaussian':
            return gaussian_kernel(size or GAUSSIAN_KERNEL_SIZE, sigma or GAUSSIAN_KERNEL_SIGMA)
        case 'uniform':
            return uniform_kernel(size or UNIFORM_KERNEL_SIZE)
        case 'delta':
            return delta_kernel()
        case 'file':
            if not path:
                raise DomainError('A file kernel needs a path')
            return load_kernel(path)
    raise DomainError(f'Unknown kernel kind "{kind}"')


def _shift_sum(x, kernel: Kernel, roll: Callable, sign: int):
    # roll(x, s)[i] == x[i - s], so each tap contributes w * x[i - d] (sign=1) or w * x[i + d] (sign=-1)
    out = None
    for weight, dr, dc in kernel.taps():
        term = weight * roll(x, (sign * dr, sign * dc), (0, 1))
        out = term if out is None else out + term
    return out


@dataclass(frozen=True, eq=False)
class ConvolutionOperator:
    """Circular 2-D convolution with a fixed kernel, applied to each channel independently.

    :param kernel: The blur kernel.
    :type kernel: deqmd.Kernel

    :param image_shape: ``(height, width, channels)`` of the images this operator acts on.
    :type image_shape: tuple[int, int, int]

    :param method: ``direct`` for the spatial sum or ``fft`` for the Fourier path. Defaults to ``direct``.
    :type method: str, optional
    """

    kernel: Kernel
    image_shape: tuple[int, int, int]
    method: str = 'direct'
    boundary: str = field(default='circular', init=False)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.image_shape)
        if len(shape) == 2:
            shape = (*shape, 1)
        if len(shape) != 3 or min(shape) < 1:
            raise ShapeMismatchError(f'Invalid image shape {self.image_shape}')
        if self.method not in ('direct', 'fft'):
            raise DomainError(f'Unknown convolution method "{self.method}"')
        object.__setattr__(self, 'image_shape', shape)

    @cached_property
    def _otf(self) -> np.ndarray:
        height, width = self.image_shape[:2]
        psf = np.zeros((height, width))
        for weight, dr, dc in self.kernel.taps():
            psf[dr % height, dc % width] += weight
        return np.fft.fft2(psf)[:, :, np.newaxis]

    @cached_property
    def adjoint_ones(self) -> np.ndarray:
        """``A^T 1``, the column sums of ``A``, as a read-only array."""
        arr = self.adjoint_array(np.ones(self.image_shape))
        arr.setflags(write=False)
        return arr

    def _check(self, arr: np.ndarray) -> None:
        if arr.shape != self.image_shape:
            raise ShapeMismatchError(f'Operator expects images of shape {self.image_shape}, got {arr.shape}')

    def apply_array(self, x: np.ndarray) -> np.ndarray:
        """``A x`` on a raw ``(height, width, channels)`` array."""
        self._check(x)
        if self.method == 'fft':
            out = np.fft.ifft2(np.fft.fft2(x, axes=(0, 1)) * self._otf, axes=(0, 1)).real
            return np.maximum(out, 0.0) if np.all(x >= 0) else out
        return _shift_sum(x, self.kernel, np.roll, 1)

    def adjoint_array(self, y: np.ndarray) -> np.ndarray:
        """``A^T y`` on a raw ``(height, width, channels)`` array."""
        self._check(y)
        if self.method == 'fft':
            out = np.fft.ifft2(np.fft.fft2(y, axes=(0, 1)) * np.conj(self._otf), axes=(0, 1)).real
            return np.maximum(out, 0.0) if np.all(y >= 0) else out
        return _shift_sum(y, self.kernel, np.roll, -1)

    def apply(self, x: Image) -> Image:
        """Blurs ``x``. Non-negative images map to non-negative images.

        :raises ShapeMismatchError: If ``x`` does not have ``image_shape``.
        """
        return Image(self.apply_array(x.data))

    def adjoint(self, y: Image) -> Image:
        """Correlates ``y`` with the kernel, so that ``<A x, y> = <x, A^T y>``.

        :raises ShapeMismatchError: If ``y`` does not have ``image_shape``.
        """
        return Image(self.adjoint_array(y.data))

    def apply_tensor(self, x: torch.Tensor) -> torch.Tensor:
        """``A x`` on a torch tensor shaped like ``image_shape``; differentiable to any order."""
        if tuple(x.shape) != self.image_shape:
            raise ShapeMismatchError(f'Operator expects tensors of shape {self.image_shape}, got {tuple(x.shape)}')
        return _shift_sum(x, self.kernel, torch.roll, 1)

    def adjoint_tensor(self, y: torch.Tensor) -> torch.Tensor:
        """``A^T y`` on a torch tensor shaped like ``image_shape``; differentiable to any order."""
        if tuple(y.shape) != self.image_shape:
            raise ShapeMismatchError(f'Operator expects tensors of shape {self.image_shape}, got {tuple(y.shape)}')
        return _shift_sum(y, self.kernel, torch.roll, -1)


@dataclass(frozen=True)
class NoiseConfig:
    """Poisson channel settings.

    :param alpha: Photon intensity. Larger values mean less noise.
    :type alpha: float
    """

    alpha: float

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise DomainError(f'alpha must be a finite positive number, got {self.alpha}')


def sample_poisson(mean: Image, cfg: NoiseConfig, seed: Seed) -> Image:
    """Draws ``Poisson(alpha * mean)`` independently for every pixel. Draws are consumed in C order of the pixel index,
    so the stream is partitioned by pixel index. A pixel with mean 0 returns exactly 0.

    :param mean: Non-negative expected intensities before scaling.
    :type mean: deqmd.Image

    :param cfg: Channel settings.
    :type cfg: NoiseConfig

    :param seed: Root of the random stream.
    :type seed: deqmd.Seed

    :raises DomainError: If any pixel of ``mean`` is negative.

    :return: Counts, stored as floats.
    :rtype: deqmd.Image
    """

    if np.any(mean.data < 0):
        raise DomainError('Poisson means must be non-negative')
    counts = seed.generator().poisson(cfg.alpha * mean.data)
    return Image(counts.astype(np.float64))


@dataclass(frozen=True, eq=False)
class Observation:
    """A clean image paired with its simulated measurement."""

    clean: Image
    observed: Image
    alpha: float
    seed: Seed


def make_dataset(
    clean_images: list[Image], op: ConvolutionOperator, cfg: NoiseConfig, seed: Seed
) -> list[Observation]:
    """Simulates measurements ``y = Poiss(alpha * A x*)`` for each clean image. Image ``i`` draws from
    ``seed.derive(i)``, which is stored with the pair so the dataset can be regenerated bit-exactly.

    :raises DomainError: If a clean image leaves ``[0, 1]``.
    :raises ShapeMismatchError: If a clean image does not fit the operator.
    """

    pairs = []
    for idx, clean in enumerate(clean_images):
        if clean.data.min() < 0 or clean.data.max() > 1:
            raise DomainError(f'Clean image {idx} leaves [0, 1]')
        pair_seed = seed.derive(idx)
        observed = sample_poisson(op.apply(clean), cfg, pair_seed)
        pairs.append(Observation(clean=clean, observed=observed, alpha=cfg.alpha, seed=pair_seed))
    log.debug(f'Simulated {len(pairs)} observation(s) at alpha={cfg.alpha}')
    return pairs


MANIFEST_FIELDS = ['clean_path', 'observed_path', 'alpha', 'seed']


def write_manifest(pairs: list[Observation], directory: str | Path, prefix: str = 'sample') -> Path:
    """Saves each pair as float images in ``directory`` and writes ``manifest.csv`` listing them.

    :return: Path of the manifest.
    :rtype: pathlib.Path
    """

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / 'manifest.csv'
    with open(manifest, 'w', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        for idx, pair in enumerate(pairs):
            clean_path = save_image(pair.clean, directory / f'{prefix}-{idx:03d}-clean.deqf')
            observed_path = save_image(pair.observed, directory / f'{prefix}-{idx:03d}-observed.deqf')
            writer.writerow(
                {
                    'clean_path': clean_path.name,
                    'observed_path': observed_path.name,
                    'alpha': repr(pair.alpha),
                    'seed': pair.seed.value,
                }
            )
    return manifest


def read_manifest(path: str | Path) -> list[Observation]:
    """Loads the pairs listed in a manifest written by :py:func:`write_manifest`. Paths are relative to the
    manifest's directory."""

    path = Path(path)
    pairs = []
    with open(path, newline='') as fh:
        for row in csv.DictReader(fh):
            pairs.append(
                Observation(
                    clean=load_image(path.parent / row['clean_path']),
                    observed=load_image(path.parent / row['observed_path']),
                    alpha=float(row['alpha']),
                    seed=Seed(int(row['seed'])),
                )
            )
    return pairs
