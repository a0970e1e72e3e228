import numpy as np
import pytest
from PIL import Image

from conftest import write_png
from cxrbridge.preprocess import center_crop_box, load_grayscale, preprocess


class TestCenterCrop:
    def test_landscape_crop(self):
        # 512 wide, 400 tall -> 400x400 box centered horizontally
        left, top, w, h = center_crop_box(400, 512)
        assert (w, h) == (400, 400)
        assert top == 0
        assert left == 56

    def test_portrait_crop(self):
        left, top, w, h = center_crop_box(512, 400)
        assert (w, h) == (400, 400)
        assert left == 0
        assert top == 56

    def test_zero_area_rejected(self):
        with pytest.raises(ValueError, match="zero-area"):
            center_crop_box(0, 100)


class TestPreprocess:
    def test_uneven_aspect_ratio(self, tmp_path):
        rng = np.random.default_rng(0)
        path = tmp_path / "wide.png"
        write_png(path, rng.integers(0, 256, (400, 512)))
        image = preprocess(path)
        assert image.pixels.shape == (224, 224)
        assert image.crop_box == (56, 0, 400, 400)

    def test_square_full_range_only_rescales(self, tmp_path):
        # a 224x224 ramp spanning 0..255 maps onto [-1024, 1024] endpoints
        ramp = np.tile(np.linspace(0, 255, 224), (224, 1))
        path = tmp_path / "ramp.png"
        write_png(path, ramp)
        image = preprocess(path)
        assert image.crop_box == (0, 0, 224, 224)
        assert image.pixels.min() == pytest.approx(-1024.0)
        assert image.pixels.max() == pytest.approx(1024.0, rel=1e-3)

    def test_uniform_white_maps_to_top(self, tmp_path):
        path = tmp_path / "white.png"
        write_png(path, np.full((64, 64), 255))
        image = preprocess(path)
        assert np.all(image.pixels == 1024.0)

    def test_uniform_black_maps_to_bottom(self, tmp_path):
        path = tmp_path / "black.png"
        write_png(path, np.zeros((64, 64)))
        image = preprocess(path)
        assert np.all(image.pixels == -1024.0)

    def test_per_image_range_mode(self, tmp_path):
        # narrow 100..150 band stretches to the full range per image
        rng = np.random.default_rng(1)
        band = rng.integers(100, 151, (64, 64))
        band[0, 0], band[1, 1] = 100, 150
        path = tmp_path / "band.png"
        write_png(path, band)
        nominal = preprocess(path)
        stretched = preprocess(path, per_image_range=True)
        assert nominal.pixels.max() < 250.0  # 150/255 of the range
        assert stretched.pixels.max() == pytest.approx(1024.0)
        assert stretched.pixels.min() == pytest.approx(-1024.0)

    def test_per_image_range_rejects_constant(self, tmp_path):
        path = tmp_path / "flat.png"
        write_png(path, np.full((32, 32), 99))
        with pytest.raises(ValueError, match="zero intensity range"):
            preprocess(path, per_image_range=True)

    def test_rgb_converted_to_grayscale(self, tmp_path):
        rgb = np.zeros((40, 40, 3), dtype=np.uint8)
        rgb[..., 0] = 255  # pure red
        path = tmp_path / "rgb.png"
        Image.fromarray(rgb, mode="RGB").save(path)
        array, nominal_max = load_grayscale(path)
        assert nominal_max == 255.0
        assert array.shape == (40, 40)
        assert 0 < array.mean() < 255

    def test_sixteen_bit_nominal_range(self, tmp_path):
        deep = np.full((32, 32), 65535, dtype=np.uint16)
        path = tmp_path / "deep.png"
        Image.fromarray(deep).save(path)
        image = preprocess(path)
        assert np.all(image.pixels == 1024.0)

    def test_undecodable_rejected(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"this is not an image")
        with pytest.raises(ValueError, match="cannot decode"):
            preprocess(path)

    def test_values_within_contract(self, tmp_path):
        rng = np.random.default_rng(5)
        path = tmp_path / "noise.png"
        write_png(path, rng.integers(0, 256, (300, 200)))
        image = preprocess(path)
        assert image.pixels.min() >= -1024.0
        assert image.pixels.max() <= 1024.0
        assert image.pixels.dtype == np.float32
