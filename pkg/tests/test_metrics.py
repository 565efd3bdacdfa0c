import numpy as np
import pytest

from deqmd import Image
from deqmd.errors import ShapeMismatchError
from deqmd.metrics import mse, psnr, ssim


@pytest.fixture
def reference(seed) -> Image:
    return Image(seed.generator().uniform(0.2, 0.8, size=(24, 24)))


def test_psnr_of_a_constant_offset(reference):
    shifted = reference.like(reference.data + 0.1)
    assert mse(shifted, reference) == pytest.approx(0.01)
    assert psnr(shifted, reference) == pytest.approx(20.0)


def test_identical_images_hit_the_cap(reference):
    assert psnr(reference, reference) == 99.0
    assert psnr(reference.like(reference.data + 1e-12), reference) == 99.0
    assert ssim(reference, reference) == pytest.approx(1.0, abs=1e-12)


def test_metrics_check_shapes(reference):
    other = Image(np.zeros((24, 23)))
    with pytest.raises(ShapeMismatchError):
        psnr(other, reference)
    with pytest.raises(ShapeMismatchError):
        ssim(other, reference)
    with pytest.raises(ShapeMismatchError):
        ssim(Image(np.zeros((6, 6))), Image(np.zeros((6, 6))))


def test_ssim_orders_by_degradation(reference, seed):
    noise = seed.derive(1).generator().normal(size=reference.shape)
    mild = reference.like(reference.data + 0.02 * noise)
    strong = reference.like(reference.data + 0.2 * noise)
    assert 1.0 > ssim(mild, reference) > ssim(strong, reference)
    assert ssim(mild, reference) == pytest.approx(ssim(reference, mild), rel=1e-12)


def test_ssim_averages_channels(reference, seed):
    noisy = reference.like(reference.data + 0.1 * seed.derive(2).generator().normal(size=reference.shape))
    stacked = Image(np.concatenate([reference.data, reference.data], axis=2))
    mixed = Image(np.concatenate([reference.data, noisy.data], axis=2))
    assert ssim(mixed, stacked) == pytest.approx(0.5 * (1.0 + ssim(noisy, reference)), rel=1e-12)
