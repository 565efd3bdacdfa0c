import numpy as np
import pytest
import torch

from conftest import assert_close_derivative, directional_check
from deqmd import Image, Seed
from deqmd.errors import DomainError, ImageFormatError, LayoutMismatchError, ShapeMismatchError, StaleTapeError
from deqmd.regularizers import (
    DEQ_RED_ARCH,
    DEQ_S_ARCH,
    Architecture,
    NetworkRegularizer,
    RedRegularizer,
    Regularizer,
    ScalarNetRegularizer,
    SmoothedTV,
    assert_smooth,
    build_regularizer,
    denoiser_apply,
    grad_x,
    load_params,
    red_value,
    save_params,
    scalar_net_value,
    softplus,
    softplus_derivative,
    tv_smoothed_grad,
    tv_smoothed_tensor,
    tv_smoothed_value,
    vjp_params,
)
from torch import nn


@pytest.fixture
def image(seed) -> Image:
    return Image(seed.derive(11).generator().uniform(0.1, 0.9, size=(8, 8)))


def test_softplus_limits():
    assert softplus(0.0) == pytest.approx(np.log(2.0) / 100.0)
    assert softplus(5.0) == pytest.approx(5.0, abs=1e-12)
    assert softplus(-5.0) == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(softplus(1e6))
    assert softplus_derivative(0.0) == 0.5
    with pytest.raises(DomainError):
        softplus(1.0, beta=0.0)


def test_softplus_derivative_matches_finite_differences():
    for x in np.linspace(-0.05, 0.05, 11):
        numeric = (softplus(x + 1e-7) - softplus(x - 1e-7)) / 2e-7
        assert softplus_derivative(x) == pytest.approx(numeric, rel=1e-5, abs=1e-9)


def test_softplus_agrees_with_torch():
    x = np.linspace(-1.0, 1.0, 101)
    reference = nn.Softplus(beta=100.0, threshold=30.0)(torch.tensor(x)).numpy()
    np.testing.assert_allclose(softplus(x), reference, atol=1e-12)


def test_tv_of_constant_image():
    assert tv_smoothed_value(Image.full((4, 5), 0.3), eps=1e-6) == pytest.approx(20 * np.sqrt(1e-6))
    np.testing.assert_allclose(tv_smoothed_grad(Image.full((4, 5), 0.3)), 0.0, atol=1e-15)
    with pytest.raises(DomainError):
        tv_smoothed_value(Image.full((2, 2), 0.3), eps=0.0)


def test_tv_gradient_matches_finite_differences(image, seed):
    rng = seed.derive(12).generator()
    x = image.data
    for _ in range(20):
        v = rng.normal(size=x.shape)
        analytic, numeric = directional_check(tv_smoothed_value, tv_smoothed_grad(x), x, v)
        assert_close_derivative(analytic, numeric)


def test_tv_tensor_matches_numpy(image):
    x = torch.tensor(image.data, requires_grad=True)
    value = tv_smoothed_tensor(x)
    value.backward()
    assert float(value) == pytest.approx(tv_smoothed_value(image), rel=1e-12)
    np.testing.assert_allclose(x.grad.numpy(), tv_smoothed_grad(image), atol=1e-10)


def test_smoothed_tv_analytic_and_autograd_paths_agree(image):
    reg = SmoothedTV(0.7)
    np.testing.assert_allclose(reg.grad_x(image), Regularizer.grad_x(reg, image), atol=1e-10)
    assert reg.n_trainable == 0
    with pytest.raises(DomainError):
        SmoothedTV(-1.0)


def test_architecture_keys_round_trip():
    for arch in (DEQ_S_ARCH, DEQ_RED_ARCH, Architecture('red', (3,), beta=50.0, final_scale=0.5)):
        assert Architecture.from_key(arch.key) == arch
    with pytest.raises(LayoutMismatchError):
        Architecture.from_key('red:three')
    with pytest.raises(DomainError):
        Architecture('scalar', (4, 4))
    with pytest.raises(DomainError):
        Architecture('relu', (4,))


def test_zero_seed_gives_zero_network(image):
    reg = ScalarNetRegularizer(DEQ_S_ARCH, None)
    assert np.all(reg.params.values == 0.0)
    assert reg.value(image) == 0.0


def test_initialization_is_seeded():
    a = RedRegularizer(DEQ_RED_ARCH, Seed(3)).params.values
    b = RedRegularizer(DEQ_RED_ARCH, Seed(3)).params.values
    c = RedRegularizer(DEQ_RED_ARCH, Seed(4)).params.values
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize('kind', ['scalar', 'red'])
def test_network_gradient_matches_finite_differences(kind, image, seed):
    reg = build_regularizer(kind, seed.derive(13))
    rng = seed.derive(14).generator()
    x = image.data
    for _ in range(20):
        v = rng.normal(size=x.shape)
        analytic, numeric = directional_check(reg.value, reg.grad_x(x), x, v)
        assert_close_derivative(analytic, numeric)


@pytest.mark.parametrize('kind', ['scalar', 'red'])
def test_parameter_vjp_matches_finite_differences(kind, image, seed):
    image = Image(image.data[:6, :6])
    reg = build_regularizer(kind, seed.derive(15))
    theta = reg.params
    value_fn = scalar_net_value if kind == 'scalar' else red_value
    cotangent = 0.7
    g = vjp_params(reg, image, cotangent)
    assert g.layout == theta.layout
    rng = seed.derive(16).generator()
    for _ in range(20):
        d = rng.normal(size=len(theta))
        h = 1e-6
        numeric = (
            value_fn(theta.with_values(theta.values + h * d), image)
            - value_fn(theta.with_values(theta.values - h * d), image)
        ) / (2 * h)
        assert_close_derivative(g.values @ d, cotangent * numeric)


def test_grad_x_wraps_image(image, seed):
    reg = build_regularizer('red', seed)
    grad = grad_x(reg, image)
    assert isinstance(grad, Image) and grad.shape == image.shape


def test_channels_are_regularized_independently(seed):
    reg = build_regularizer('scalar', seed)
    rng = seed.derive(17).generator()
    a, b = rng.uniform(size=(6, 6, 1)), rng.uniform(size=(6, 6, 1))
    both = np.concatenate([a, b], axis=2)
    assert reg.value(both) == pytest.approx(reg.value(a) + reg.value(b), rel=1e-12)


def test_tape_replays_once(image, seed):
    tape = build_regularizer('scalar', seed).record(image)
    assert tape.evaluations == 1
    grads = tape.backward(1.0)
    assert grads.x.shape == image.shape
    with pytest.raises(StaleTapeError):
        tape.backward(1.0)


def test_tape_checks_cotangent_shape(image, seed):
    tape = build_regularizer('scalar', seed).record(image)
    with pytest.raises(ShapeMismatchError):
        tape.backward(np.ones(2))


def test_non_smooth_primitives_are_rejected():
    network = DEQ_S_ARCH.build(None)
    network.act = nn.ReLU()
    with pytest.raises(DomainError):
        assert_smooth(network)
    with pytest.raises(DomainError):
        assert_smooth(nn.Sequential(nn.Conv2d(1, 1, 3), nn.MaxPool2d(2)))


def test_denoiser_is_residual(image, seed):
    theta = RedRegularizer(DEQ_RED_ARCH, None).params
    np.testing.assert_array_equal(denoiser_apply(theta, image).data, image.data)
    assert red_value(theta, image) == 0.0
    with pytest.raises(LayoutMismatchError):
        scalar_net_value(theta, image)


def test_duplicated_channel_leaves_red_value_unchanged(image, seed):
    small = RedRegularizer(Architecture('red', (4, 4)), seed.derive(18))
    wide = RedRegularizer(Architecture('red', (5, 4)), None)
    src, dst = small.network.convs, wide.network.convs
    with torch.no_grad():
        for conv in src:
            conv.bias.normal_(0.0, 0.1, generator=seed.derive(19).torch_generator())
        dst[0].weight[:4] = src[0].weight
        dst[0].bias[:4] = src[0].bias
        dst[0].weight[4] = src[0].weight[0]
        dst[0].bias[4] = src[0].bias[0]
        dst[1].weight[:, :4] = src[1].weight
        dst[1].weight[:, 0] *= 0.5
        dst[1].weight[:, 4] = dst[1].weight[:, 0]
        dst[1].bias.copy_(src[1].bias)
        dst[2].weight.copy_(src[2].weight)
        dst[2].bias.copy_(src[2].bias)
    assert wide.value(image) == pytest.approx(small.value(image), rel=1e-10)


def test_checkpoint_round_trip(tmp_path, image, seed):
    reg = build_regularizer('scalar', seed)
    path = save_params(reg.params, tmp_path / 'ckpt' / 'theta.deqp')
    assert path.read_bytes()[:4] == b'DEQP'
    theta = load_params(path, DEQ_S_ARCH)
    np.testing.assert_array_equal(theta.values, reg.params.values)
    restored = NetworkRegularizer.from_params(theta)
    assert restored.value(image) == pytest.approx(reg.value(image), rel=1e-14)


def test_checkpoint_mismatches(tmp_path, seed):
    path = save_params(build_regularizer('red', seed).params, tmp_path / 'red.deqp')
    with pytest.raises(LayoutMismatchError):
        load_params(path, DEQ_S_ARCH)
    with pytest.raises(LayoutMismatchError):
        ScalarNetRegularizer().set_params(load_params(path))
    with pytest.raises(LayoutMismatchError):
        save_params(SmoothedTV(1.0).params, tmp_path / 'tv.deqp')
    corrupt = tmp_path / 'corrupt.deqp'
    corrupt.write_bytes(b'XXXX' + path.read_bytes()[4:])
    with pytest.raises(ImageFormatError):
        load_params(corrupt)
    truncated = tmp_path / 'truncated.deqp'
    truncated.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ImageFormatError):
        load_params(truncated)


def test_unknown_kind():
    with pytest.raises(DomainError):
        build_regularizer('bm3d')
