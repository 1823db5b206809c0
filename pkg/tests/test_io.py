import struct

import numpy as np
import pytest
from PIL import Image

from fringelab import io


def test_fpt1_layout():
    buf = io.encode_fpt1(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert buf[:4] == b"FPT1"
    assert struct.unpack("<III", buf[4:16]) == (2, 2, 3)
    assert np.frombuffer(buf[16:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_fpt1_round_trip(tmp_path, rng):
    a = rng.normal(size=(3, 4, 5)).astype(np.float32)
    io.save_fpt1(tmp_path / "a.fpt", a)
    b = io.load_fpt1(tmp_path / "a.fpt")
    assert b.dtype == np.float32 and np.array_equal(a, b)


def test_fpt1_rejects_bad_files(tmp_path):
    (tmp_path / "x.fpt").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(io.FormatError):
        io.load_fpt1(tmp_path / "x.fpt")
    good = io.encode_fpt1(np.zeros((4, 4)))
    (tmp_path / "t.fpt").write_bytes(good[:-3])
    with pytest.raises(io.FormatError):
        io.load_fpt1(tmp_path / "t.fpt")
    (tmp_path / "e.fpt").write_bytes(good + b"\0")
    with pytest.raises(io.FormatError):
        io.load_fpt1(tmp_path / "e.fpt")


def test_fpw1_round_trip(tmp_path, rng):
    tensors = [rng.normal(size=(2, 3)).astype(np.float32), np.ones(4, np.float32)]
    io.save_fpw1(tmp_path / "w.fpw", {"b": 1, "a": [1, 2]}, tensors)
    header, back = io.load_fpw1(tmp_path / "w.fpw")
    assert header == {"a": [1, 2], "b": 1}
    assert all(np.array_equal(x, y) for x, y in zip(tensors, back))
    raw = (tmp_path / "w.fpw").read_bytes()
    assert raw[:4] == b"FPW1"


def test_pgm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (7, 9)).astype(np.float64)
    io.save_pgm(tmp_path / "f.pgm", img)
    assert (tmp_path / "f.pgm").read_bytes().startswith(b"P5\n9 7\n255\n")
    assert np.array_equal(io.load_pgm(tmp_path / "f.pgm"), img)


def test_pgm_16bit(tmp_path):
    img = np.array([[0, 1000], [65535, 7]], dtype=np.float64)
    io.save_pgm(tmp_path / "f.pgm", img, maxval=65535)
    raw = (tmp_path / "f.pgm").read_bytes()
    assert np.frombuffer(raw[-8:], ">u2").tolist() == [0, 1000, 65535, 7]


def test_heatmap_masks_and_is_deterministic(tmp_path):
    err = np.linspace(0, 1, 64).reshape(8, 8)
    mask = np.ones((8, 8), bool)
    mask[0, 0] = False
    io.save_png_heatmap(tmp_path / "a.png", err, 0.0, 1.0, mask)
    io.save_png_heatmap(tmp_path / "b.png", err, 0.0, 1.0, mask)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    rgb = np.asarray(Image.open(tmp_path / "a.png"))
    assert rgb.shape == (8, 8, 3) and not rgb[0, 0].any()


def test_png_gray(tmp_path):
    io.save_png_gray(tmp_path / "g.png", np.array([[0.0, 1.0], [2.0, 4.0]]))
    assert np.asarray(Image.open(tmp_path / "g.png")).tolist() == [[0, 64], [128, 255]]
