import math
import os
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ttdfusion.imaging import (
    ImageFormatError,
    as_image,
    gaussian_blur,
    gaussian_kernel1d,
    histogram256,
    load_image,
    pack_raw_map,
    save_image,
    sobel_magnitude,
    to_grayscale,
    unpack_raw_map,
    write_pgm,
)
from ttdfusion.rng import CounterRNG


def _png_bytes(width, height, color_type, rows):
    """Minimal independent PNG encoder (filter type 0, single IDAT)."""
    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data))

    ihdr = struct.pack(">IIBBBBB", width, height, 8, color_type, 0, 0, 0)
    raw = b"".join(b"\x00" + bytes(r) for r in rows)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b"")


class TestLoadImage:
    def test_pgm_extremes(self, tmp_path):
        for byte, expected in ((255, 1.0), (0, 0.0)):
            p = tmp_path / f"{byte}.pgm"
            p.write_bytes(b"P5\n1 1\n255\n" + bytes([byte]))
            img = load_image(p)
            assert img.shape == (1, 1, 1)
            assert img[0, 0, 0] == expected

    def test_pgm_with_comment(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 51]))
        np.testing.assert_array_equal(load_image(p)[:, :, 0], [[0.0, 0.2]])

    def test_rgb_png_against_hand_encoder(self, tmp_path):
        rows = [[10, 20, 30, 40, 50, 60], [255, 0, 128, 1, 2, 3]]
        p = tmp_path / "rgb.png"
        p.write_bytes(_png_bytes(2, 2, 2, rows))
        expected = np.array(rows, dtype=np.float64).reshape(2, 2, 3) / 255.0
        np.testing.assert_array_equal(load_image(p), expected)

    def test_gray_png(self, tmp_path):
        p = tmp_path / "g.png"
        p.write_bytes(_png_bytes(3, 1, 0, [[0, 17, 255]]))
        np.testing.assert_array_equal(load_image(p)[:, :, 0], [[0.0, 17 / 255, 1.0]])

    def test_rejects_unsupported(self, tmp_path):
        bad = tmp_path / "x.bmp"
        bad.write_bytes(b"BM" + b"\x00" * 20)
        with pytest.raises(ImageFormatError):
            load_image(bad)
        rgba = tmp_path / "rgba.png"
        rgba.write_bytes(_png_bytes(1, 1, 6, [[1, 2, 3, 4]]))
        with pytest.raises(ImageFormatError):
            load_image(rgba)

    def test_rejects_truncated_and_empty(self, tmp_path):
        p = tmp_path / "t.pgm"
        p.write_bytes(b"P5\n4 4\n255\n" + bytes(5))
        with pytest.raises(ImageFormatError):
            load_image(p)
        p.write_bytes(b"P5\n0 3\n255\n")
        with pytest.raises(ImageFormatError):
            load_image(p)
        p.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
        with pytest.raises(ImageFormatError):
            load_image(p)
        png = tmp_path / "t.png"
        png.write_bytes(_png_bytes(2, 2, 0, [[1, 2], [3, 4]])[:30])
        with pytest.raises(ImageFormatError):
            load_image(png)


class TestSaveImage:
    def test_constant_roundtrip(self, tmp_path):
        p = tmp_path / "half.png"
        save_image(np.full((4, 5, 1), 0.5), p)
        assert np.max(np.abs(load_image(p) - 0.5)) <= 1 / 510

    @pytest.mark.parametrize("channels", [1, 3])
    def test_seeded_roundtrip(self, tmp_path, channels):
        img = CounterRNG(3).uniform((9, 7, channels))
        p = tmp_path / "r.png"
        save_image(img, p)
        assert np.max(np.abs(load_image(p) - img)) <= 1 / 510 + 1e-15

    def test_unwritable(self, tmp_path):
        ro = tmp_path / "ro"
        ro.mkdir()
        os.chmod(ro, 0o500)
        try:
            if os.access(ro, os.W_OK):
                pytest.skip("running with privileges that ignore directory permissions")
            with pytest.raises(OSError):
                save_image(np.zeros((2, 2, 1)), ro / "x.png")
        finally:
            os.chmod(ro, 0o700)
        with pytest.raises(OSError):
            save_image(np.zeros((2, 2, 1)), tmp_path / "missing" / "x.png")

    def test_pgm_writer_roundtrip(self, tmp_path):
        px = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
        write_pgm(px, tmp_path / "m.pgm")
        np.testing.assert_array_equal(load_image(tmp_path / "m.pgm")[:, :, 0], px / 255.0)


class TestAsImage:
    def test_validation(self):
        assert as_image(np.zeros((2, 3))).shape == (2, 3, 1)
        with pytest.raises(ValueError):
            as_image(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            as_image(np.full((2, 2, 1), 1.5))
        with pytest.raises(ValueError):
            as_image(np.full((2, 2, 1), np.nan))
        np.testing.assert_array_equal(as_image(np.array([[-1.0, 2.0]]), clamp=True)[:, :, 0], [[0.0, 1.0]])


class TestGrayscale:
    def test_weights(self):
        assert to_grayscale(np.ones((1, 1, 3)))[0, 0, 0] == pytest.approx(1.0, abs=1e-15)
        assert to_grayscale(np.array([[[1.0, 0.0, 0.0]]]))[0, 0, 0] == 0.299

    def test_gray_identity(self):
        img = CounterRNG(1).uniform((4, 4, 1))
        np.testing.assert_array_equal(to_grayscale(img), img)


class TestHistogram:
    def test_constants(self):
        h0 = histogram256(np.zeros((2, 2, 1)))
        assert h0.bins[0] == 4 and h0.bins.sum() == 4 and h0.total == 4
        assert histogram256(np.ones((2, 2, 1))).bins[255] == 4

    def test_brute_force(self):
        img = CounterRNG(8).uniform((8, 8, 1))
        expected = np.zeros(256, dtype=int)
        for v in img.ravel():
            expected[min(255, max(0, int(math.floor(v * 255 + 0.5))))] += 1
        np.testing.assert_array_equal(histogram256(img).bins, expected)

    def test_rejects_rgb(self):
        with pytest.raises(ValueError):
            histogram256(np.zeros((2, 2, 3)))

    @given(arrays(np.float64, (5, 6), elements=st.floats(0, 1)))
    def test_total_is_pixel_count(self, img):
        h = histogram256(img)
        assert h.total == 30 and h.bins.sum() == 30


def _sobel_oracle(p):
    h, w = p.shape
    out = np.zeros_like(p)
    for y in range(h):
        for x in range(w):
            at = lambda dy, dx: p[min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)]  # noqa: E731
            gx = at(-1, 1) + 2 * at(0, 1) + at(1, 1) - at(-1, -1) - 2 * at(0, -1) - at(1, -1)
            gy = at(1, -1) + 2 * at(1, 0) + at(1, 1) - at(-1, -1) - 2 * at(-1, 0) - at(-1, 1)
            out[y, x] = math.hypot(gx, gy)
    return out


class TestSobel:
    def test_constant(self):
        np.testing.assert_array_equal(sobel_magnitude(np.full((5, 5, 1), 0.3)), 0.0)

    def test_step_edge(self):
        img = np.zeros((5, 6))
        img[:, 3:] = 1.0
        mag = sobel_magnitude(img)
        np.testing.assert_allclose(mag[1:-1, 2], 4.0)
        np.testing.assert_allclose(mag[1:-1, 3], 4.0)
        np.testing.assert_array_equal(mag[:, 0], 0.0)

    def test_brute_force(self):
        img = CounterRNG(5).uniform((5, 5))
        np.testing.assert_allclose(sobel_magnitude(img), _sobel_oracle(img), atol=1e-12)


class TestGaussianBlur:
    def test_kernel(self):
        k = gaussian_kernel1d(1.0)
        assert len(k) == 7
        assert k.sum() == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(k[3] / k[4], math.exp(0.5))
        with pytest.raises(ValueError):
            gaussian_kernel1d(0.0)

    def test_constant_unchanged(self):
        np.testing.assert_allclose(gaussian_blur(np.full((9, 9, 1), 0.42), 2.0), 0.42, atol=1e-15)

    def test_impulse_gives_kernel(self):
        img = np.zeros((15, 15))
        img[7, 7] = 1.0
        k = gaussian_kernel1d(1.5)
        np.testing.assert_allclose(gaussian_blur(img, 1.5)[2:13, 2:13], np.outer(k, k), atol=1e-15)

    @pytest.mark.parametrize("sigma", [0.5, 1.5, 4.0])
    def test_preserves_mean(self, sigma):
        img = CounterRNG(11).uniform((32, 32))
        assert abs(gaussian_blur(img, sigma).mean() - img.mean()) < 1e-6

    @settings(max_examples=30)
    @given(st.integers(0, 2**32), st.floats(0.3, 3.0))
    def test_range_preserved(self, seed, sigma):
        img = CounterRNG(seed).uniform((10, 12, 1))
        out = gaussian_blur(img, sigma)
        assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


class TestRawMap:
    def test_roundtrip(self):
        m = CounterRNG(2).uniform((3, 4))
        buf = pack_raw_map(m)
        assert buf[:8] == struct.pack("<II", 3, 4) and len(buf) == 8 + 48
        np.testing.assert_allclose(unpack_raw_map(buf), m.astype(np.float32))

    def test_bad_size(self):
        with pytest.raises(ImageFormatError):
            unpack_raw_map(struct.pack("<II", 2, 2) + b"\x00" * 3)
