"""PNG IO: normalization arithmetic, quantization rule, round trips, errors."""
import cv2
import numpy as np
import pytest

from llfusion.errors import FormatError, ShapeError
from llfusion.imageio import (load_rgb, load_thermal, quantize_u8, save_gray_u8,
                              save_image)


def _write_png(path, arr):
    assert cv2.imwrite(str(path), arr)


def test_8bit_full_scale_and_zero(tmp_path):
    raw = np.zeros((8, 8, 3), dtype=np.uint8)
    raw[0, 0] = 255
    _write_png(tmp_path / "a.png", raw)
    img = load_rgb(tmp_path / "a.png")
    assert img[0, 0, 0] == 1.0
    assert img[1, 1, 0] == 0.0


def test_16bit_normalization(tmp_path):
    raw = np.full((8, 8, 3), 32768, dtype=np.uint16)
    _write_png(tmp_path / "b.png", raw)
    img = load_rgb(tmp_path / "b.png")
    assert img[0, 0, 0] == pytest.approx(32768 / 65535, abs=1e-12)


def test_rgb_channel_order(tmp_path):
    raw = np.zeros((8, 8, 3), dtype=np.uint8)
    raw[:, :, 2] = 200  # OpenCV writes BGR; this is the red plane
    _write_png(tmp_path / "c.png", raw)
    img = load_rgb(tmp_path / "c.png")
    assert img[0, 0, 0] == pytest.approx(200 / 255)
    assert img[0, 0, 1] == 0.0


def test_load_rgb_rejects_gray(tmp_path):
    _write_png(tmp_path / "g.png", np.zeros((8, 8), dtype=np.uint8))
    with pytest.raises(FormatError):
        load_rgb(tmp_path / "g.png")


def test_load_rgb_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_rgb(tmp_path / "nope.png")


def test_quantization_round_half_up():
    assert quantize_u8(np.full((1, 1, 3), 1.0))[0, 0, 0] == 255
    assert quantize_u8(np.full((1, 1, 3), 0.5))[0, 0, 0] == 128  # round(127.5) up
    assert quantize_u8(np.full((1, 1, 3), 1.7))[0, 0, 0] == 255  # clamp first
    assert quantize_u8(np.full((1, 1, 3), -0.3))[0, 0, 0] == 0


def test_save_load_round_trip_bound(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (16, 16, 3))
    save_image(img, tmp_path / "r.png")
    back = load_rgb(tmp_path / "r.png")
    assert np.max(np.abs(back - img)) <= 1 / 510 + 1e-12


def test_load_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    save_image(rng.uniform(0, 1, (12, 12, 3)), tmp_path / "d.png")
    a = load_rgb(tmp_path / "d.png")
    b = load_rgb(tmp_path / "d.png")
    assert np.array_equal(a, b)


def test_thermal_single_channel(tmp_path):
    raw = np.full((8, 8), 128, dtype=np.uint8)
    _write_png(tmp_path / "t.png", raw)
    t = load_thermal(tmp_path / "t.png")
    assert t.shape == (8, 8, 1)
    assert t[0, 0, 0] == pytest.approx(128 / 255)


def test_thermal_grayscale_rgb_accepted(tmp_path):
    raw = np.full((8, 8, 3), 200, dtype=np.uint8)
    _write_png(tmp_path / "t3.png", raw)
    t = load_thermal(tmp_path / "t3.png")
    assert t[0, 0, 0] == pytest.approx(200 / 255)


def test_thermal_one_lsb_spread_accepted(tmp_path):
    raw = np.stack([np.full((8, 8), 100, np.uint8),
                    np.full((8, 8), 101, np.uint8),
                    np.full((8, 8), 100, np.uint8)], axis=-1)
    _write_png(tmp_path / "t1.png", raw)
    t = load_thermal(tmp_path / "t1.png")
    assert t[0, 0, 0] == pytest.approx((100 + 101 + 100) / 3 / 255)


def test_thermal_colored_rejected(tmp_path):
    raw = np.zeros((8, 8, 3), dtype=np.uint8)
    raw[:, :, 0] = 10
    raw[:, :, 1] = 200
    raw[:, :, 2] = 10
    _write_png(tmp_path / "bad.png", raw)
    with pytest.raises(FormatError):
        load_thermal(tmp_path / "bad.png")


def test_save_rejects_wrong_shape(tmp_path):
    with pytest.raises(ShapeError):
        save_image(np.zeros((8, 8)), tmp_path / "x.png")
    with pytest.raises(ValueError):
        save_image(np.full((8, 8, 3), np.nan), tmp_path / "y.png")


def test_min_size_enforced(tmp_path):
    _write_png(tmp_path / "small.png", np.zeros((4, 4, 3), dtype=np.uint8))
    with pytest.raises(ShapeError):
        load_rgb(tmp_path / "small.png")


def test_save_gray_round_trip(tmp_path):
    g = np.linspace(0, 1, 64).reshape(8, 8)
    save_gray_u8(g, tmp_path / "g.png")
    back = load_thermal(tmp_path / "g.png")
    assert np.max(np.abs(back[:, :, 0] - g)) <= 1 / 510 + 1e-12
