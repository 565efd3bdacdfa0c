import numpy as np
import pytest

from deqmd import Image, Seed
from deqmd.forward import ConvolutionOperator, NoiseConfig, delta_kernel, gaussian_kernel, sample_poisson
from deqmd.harness import synthetic_images


def directional_check(value_fn, grad, x: np.ndarray, direction: np.ndarray, h: float = 1e-6) -> tuple[float, float]:
    """Returns ``(analytic, central difference)`` of the derivative of ``value_fn`` at ``x`` along ``direction``."""
    analytic = float(np.sum(grad * direction))
    numeric = (value_fn(x + h * direction) - value_fn(x - h * direction)) / (2 * h)
    return analytic, numeric


def assert_close_derivative(analytic: float, numeric: float, rel: float = 1e-4, floor: float = 1e-7) -> None:
    assert abs(analytic - numeric) <= rel * max(abs(analytic), abs(numeric), floor)


@pytest.fixture
def seed() -> Seed:
    return Seed(20240611)


@pytest.fixture
def gaussian_op() -> ConvolutionOperator:
    """The 11x11 Gaussian blur with sigma 1.2 on 32x32 images."""
    return ConvolutionOperator(gaussian_kernel(11, 1.2), (32, 32, 1))


@pytest.fixture
def small_op() -> ConvolutionOperator:
    return ConvolutionOperator(gaussian_kernel(5, 1.0), (16, 16, 1))


@pytest.fixture
def delta_op() -> ConvolutionOperator:
    return ConvolutionOperator(delta_kernel(), (16, 16, 1))


def make_problem(op: ConvolutionOperator, alpha: float, seed: Seed) -> tuple[Image, Image]:
    """A clean piecewise-smooth image and its Poisson measurement at intensity ``alpha``."""
    clean = synthetic_images(1, op.image_shape[0], seed.derive(0))[0]
    observed = sample_poisson(op.apply(clean), NoiseConfig(alpha), seed.derive(1))
    return clean, observed


@pytest.fixture
def toy_problem(gaussian_op, seed):
    return make_problem(gaussian_op, 100.0, seed)
