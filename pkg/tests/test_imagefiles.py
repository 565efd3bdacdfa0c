import numpy as np
import pytest

from deqmd import Image
from deqmd.errors import ImageFormatError, ShapeMismatchError
from deqmd.imagefiles import load_image, save_image


def test_float_format_is_lossless(tmp_path, seed):
    img = Image(seed.generator().normal(size=(7, 5, 3)))
    path = save_image(img, tmp_path / 'x.deqf')
    assert path.read_bytes()[:4] == b'DEQF'
    np.testing.assert_array_equal(load_image(path).data, img.data)


def test_png_quantizes_to_8_bits(tmp_path, seed):
    img = Image(seed.generator().uniform(size=(6, 6)))
    loaded = load_image(save_image(img, tmp_path / 'x.png'))
    assert loaded.shape == (6, 6, 1)
    assert np.max(np.abs(loaded.data - img.data)) <= 0.5 / 255 + 1e-12


def test_png_clips_out_of_range(tmp_path):
    img = Image(np.array([[-0.5, 1.5]]))
    loaded = load_image(save_image(img, tmp_path / 'x.pgm'))
    np.testing.assert_array_equal(loaded.data[:, :, 0], [[0.0, 1.0]])


def test_rgb_to_luminance(tmp_path):
    rgb = Image(np.stack([np.full((4, 4), 1.0), np.zeros((4, 4)), np.zeros((4, 4))], axis=2))
    path = save_image(rgb, tmp_path / 'x.ppm')
    assert load_image(path).channels == 3
    gray = load_image(path, channels=1)
    assert gray.shape == (4, 4, 1)
    np.testing.assert_allclose(gray.data, 0.299)
    with pytest.raises(ShapeMismatchError):
        load_image(path, channels=2)


def test_rejects_corrupt_and_unknown_files(tmp_path):
    bad = tmp_path / 'bad.deqf'
    bad.write_bytes(b'NOPE' + bytes(12))
    with pytest.raises(ImageFormatError):
        load_image(bad)
    short = tmp_path / 'short.deqf'
    save_image(Image(np.zeros((2, 2))), short)
    short.write_bytes(short.read_bytes()[:-8])
    with pytest.raises(ImageFormatError):
        load_image(short)
    with pytest.raises(ImageFormatError):
        save_image(Image(np.zeros((2, 2))), tmp_path / 'x.bmp')
    with pytest.raises(ImageFormatError):
        save_image(Image(np.zeros((2, 2, 2))), tmp_path / 'x.png')
