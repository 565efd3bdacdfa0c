import numpy as np
import pytest
import torch

from deqmd import Image, Kernel, Seed
from deqmd.errors import DomainError, ImageFormatError, ShapeMismatchError
from deqmd.forward import (
    ConvolutionOperator,
    NoiseConfig,
    gaussian_kernel,
    kernel_from_spec,
    load_kernel,
    make_dataset,
    read_manifest,
    sample_poisson,
    save_kernel,
    uniform_kernel,
    write_manifest,
)
from deqmd.harness import synthetic_images


def test_builtin_kernels_are_normalized():
    for kernel in (gaussian_kernel(), uniform_kernel(), load_kernel('motion')):
        assert kernel.mass == pytest.approx(1.0, abs=1e-12)
    assert gaussian_kernel().weights.shape == (11, 11)
    assert uniform_kernel().weights.shape == (9, 9)


def test_kernel_file_round_trip(tmp_path):
    kernel = Kernel(np.array([[0.1, 0.2, 0.0], [0.3, 0.4, 0.0]]), anchor=(1, 0))
    loaded = load_kernel(save_kernel(kernel, tmp_path / 'k.txt'))
    np.testing.assert_array_equal(loaded.weights, kernel.weights)
    assert loaded.anchor == (1, 0)


def test_malformed_kernel_file(tmp_path):
    path = tmp_path / 'k.txt'
    path.write_text('2 2 0 0\n1 2\n')
    with pytest.raises(ImageFormatError):
        load_kernel(path)
    with pytest.raises(DomainError):
        kernel_from_spec('file')


def test_delta_kernel_is_identity(delta_op, seed):
    x = Image(seed.generator().uniform(size=(16, 16)))
    np.testing.assert_array_equal(delta_op.apply(x).data, x.data)
    np.testing.assert_array_equal(delta_op.adjoint(x).data, x.data)


def brute_force_convolution(x: np.ndarray, kernel: Kernel) -> np.ndarray:
    height, width = x.shape
    out = np.zeros_like(x)
    for i in range(height):
        for j in range(width):
            for (r, c), w in np.ndenumerate(kernel.weights):
                dr, dc = r - kernel.anchor[0], c - kernel.anchor[1]
                out[i, j] += w * x[(i - dr) % height, (j - dc) % width]
    return out


def test_two_by_two_convolution_matches_direct_summation():
    kernel = Kernel(np.array([[0.0, 1.0], [0.0, 0.0]]), anchor=(0, 0))
    x = np.array([[1.0, 0.0], [0.0, 0.0]])
    for method in ('direct', 'fft'):
        blurred = ConvolutionOperator(kernel, (2, 2, 1), method=method).apply(Image(x)).data[:, :, 0]
        np.testing.assert_allclose(blurred, brute_force_convolution(x, kernel), atol=1e-12)
    np.testing.assert_array_equal(brute_force_convolution(x, kernel), [[0.0, 1.0], [0.0, 0.0]])


def test_convolution_matches_direct_summation(seed):
    rng = seed.generator()
    kernel = Kernel(rng.uniform(size=(3, 3)))
    op = ConvolutionOperator(kernel, (4, 5, 1))
    for _ in range(20):
        x = rng.uniform(size=(4, 5))
        np.testing.assert_allclose(op.apply(Image(x)).data[:, :, 0], brute_force_convolution(x, kernel), rtol=1e-12)


@pytest.mark.parametrize('kernel', [gaussian_kernel(5, 1.0), load_kernel('motion')])
def test_adjoint_identity(kernel, seed):
    op = ConvolutionOperator(kernel, (12, 10, 2))
    rng = seed.generator()
    for _ in range(20):
        x = rng.normal(size=(12, 10, 2))
        y = rng.normal(size=(12, 10, 2))
        lhs = np.sum(op.apply_array(x) * y)
        rhs = np.sum(x * op.adjoint_array(y))
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_fft_path_matches_direct(seed):
    kernel = load_kernel('motion')
    direct = ConvolutionOperator(kernel, (16, 20, 1))
    fft = ConvolutionOperator(kernel, (16, 20, 1), method='fft')
    x = seed.generator().uniform(size=(16, 20, 1))
    np.testing.assert_allclose(fft.apply_array(x), direct.apply_array(x), atol=1e-10)
    np.testing.assert_allclose(fft.adjoint_array(x), direct.adjoint_array(x), atol=1e-10)


def test_tensor_path_matches_arrays(small_op, seed):
    x = seed.generator().uniform(size=(16, 16, 1))
    np.testing.assert_allclose(small_op.apply_tensor(torch.tensor(x)).numpy(), small_op.apply_array(x), atol=1e-14)
    np.testing.assert_allclose(small_op.adjoint_tensor(torch.tensor(x)).numpy(), small_op.adjoint_array(x), atol=1e-14)


def test_blur_preserves_non_negativity_and_mass(small_op, seed):
    x = Image(seed.generator().uniform(size=(16, 16)))
    blurred = small_op.apply(x)
    assert blurred.data.min() >= 0
    assert blurred.data.sum() == pytest.approx(x.data.sum(), rel=1e-12)
    np.testing.assert_allclose(small_op.adjoint_ones, 1.0, atol=1e-12)


def test_operator_shape_checks(small_op):
    with pytest.raises(ShapeMismatchError):
        small_op.apply(Image(np.zeros((8, 8))))


def test_poisson_zero_mean_gives_zero(seed):
    counts = sample_poisson(Image(np.zeros((8, 8))), NoiseConfig(40.0), seed)
    assert np.all(counts.data == 0.0)


def test_poisson_rejects_negative_mean(seed):
    with pytest.raises(DomainError):
        sample_poisson(Image(np.array([[-1.0]])), NoiseConfig(1.0), seed)
    with pytest.raises(DomainError):
        NoiseConfig(0.0)


@pytest.mark.parametrize('lam', [0.5, 5.0, 50.0])
def test_poisson_channel_statistics(lam):
    n = 100_000
    counts = sample_poisson(Image.full((100, 1000), lam), NoiseConfig(1.0), Seed(97)).data.ravel()
    assert np.all(counts == np.round(counts)) and counts.min() >= 0
    assert abs(counts.mean() - lam) <= 3 * np.sqrt(lam / n)
    # Var(s^2) is about (mu_4 - sigma^4) / n = (lam + 2 lam^2) / n for Poisson
    assert abs(counts.var(ddof=1) - lam) <= 3 * np.sqrt((lam + 2 * lam**2) / n)


def test_poisson_is_reproducible(seed):
    mean = Image.full((8, 8), 3.0)
    a = sample_poisson(mean, NoiseConfig(10.0), seed)
    b = sample_poisson(mean, NoiseConfig(10.0), seed)
    np.testing.assert_array_equal(a.data, b.data)


def test_dataset_and_manifest_round_trip(tmp_path, small_op, seed):
    clean = synthetic_images(3, 16, seed)
    pairs = make_dataset(clean, small_op, NoiseConfig(60.0), seed)
    again = make_dataset(clean, small_op, NoiseConfig(60.0), seed)
    assert len(pairs) == 3
    for a, b in zip(pairs, again):
        np.testing.assert_array_equal(a.observed.data, b.observed.data)
    manifest = write_manifest(pairs, tmp_path / 'data')
    loaded = read_manifest(manifest)
    assert len(loaded) == 3
    for a, b in zip(pairs, loaded):
        np.testing.assert_array_equal(a.clean.data, b.clean.data)
        np.testing.assert_array_equal(a.observed.data, b.observed.data)
        assert (a.alpha, a.seed) == (b.alpha, b.seed)


def test_dataset_rejects_out_of_range_images(small_op, seed):
    with pytest.raises(DomainError):
        make_dataset([Image.full((16, 16), 1.5)], small_op, NoiseConfig(60.0), seed)
