import numpy as np
import pytest

from semfield import imgio


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (7, 5, 3), dtype=np.uint8)
    p = tmp_path / "a.ppm"
    imgio.write_ppm(p, img)
    back = imgio.read_ppm(p)
    np.testing.assert_array_equal(back, img)


def test_ppm_float_input_quantizes(tmp_path):
    img = np.zeros((2, 2, 3))
    img[0, 0] = [1.0, 0.5, 0.0]
    img[1, 1] = [2.0, -1.0, 0.25]  # out of range gets clipped
    p = tmp_path / "f.ppm"
    imgio.write_ppm(p, img)
    back = imgio.read_ppm(p)
    assert back[0, 0].tolist() == [255, 128, 0]
    assert back[1, 1].tolist() == [255, 0, 64]


def test_pgm_8bit_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (4, 6), dtype=np.uint8)
    p = tmp_path / "a.pgm"
    imgio.write_pgm(p, img)
    np.testing.assert_array_equal(imgio.read_pgm(p), img)


def test_pgm_16bit_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    img = rng.integers(0, 65536, (3, 4), dtype=np.uint16)
    p = tmp_path / "d.pgm"
    imgio.write_pgm(p, img)
    back = imgio.read_pgm(p)
    assert back.dtype == np.uint16
    np.testing.assert_array_equal(back, img)


def test_pgm_16bit_is_big_endian_on_disk(tmp_path):
    p = tmp_path / "e.pgm"
    imgio.write_pgm(p, np.array([[0x0102]], dtype=np.uint16))
    raw = p.read_bytes()
    assert raw.endswith(b"\x01\x02")


def test_deterministic_bytes(tmp_path):
    rng = np.random.default_rng(3)
    img = rng.uniform(0, 1, (5, 5, 3))
    p1, p2 = tmp_path / "1.ppm", tmp_path / "2.ppm"
    imgio.write_ppm(p1, img)
    imgio.write_ppm(p2, img.copy())
    assert p1.read_bytes() == p2.read_bytes()


def test_header_comments_are_skipped(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# a comment\n2 1\n255\n\x07\x09")
    np.testing.assert_array_equal(imgio.read_pgm(p), [[7, 9]])


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "x.ppm"
    p.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(imgio.ImageFormatError):
        imgio.read_ppm(p)


def test_truncated_pixels_rejected(tmp_path):
    p = tmp_path / "t.pgm"
    p.write_bytes(b"P5\n4 4\n255\nab")
    with pytest.raises(imgio.ImageFormatError):
        imgio.read_pgm(p)


def test_wrong_shapes_rejected(tmp_path):
    with pytest.raises(ValueError):
        imgio.write_ppm(tmp_path / "b.ppm", np.zeros((4, 4)))
    with pytest.raises(ValueError):
        imgio.write_pgm(tmp_path / "b.pgm", np.zeros((4, 4, 3), np.uint8))
    with pytest.raises(ValueError):
        imgio.write_pgm(tmp_path / "b.pgm", np.zeros((4, 4), np.float32))
