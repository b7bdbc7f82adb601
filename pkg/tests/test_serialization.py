"""Container format tests: tensor records, checkpoints, flat configs, and
PGM images."""

import io
import os

import numpy as np
import pytest

from minet import serialization
from minet.serialization import FormatError


# ---------------------------------------------------------------------------
# tensor records


def test_tensor_round_trip_preserves_bytes(tmp_path):
    rng = np.random.default_rng(0)
    for rank in range(1, 5):
        shape = tuple(int(d) for d in rng.integers(1, 6, size=rank))
        arr = rng.standard_normal(shape)
        path = str(tmp_path / ("t%d.mnt1" % rank))
        serialization.save_tensor(path, arr)
        back = serialization.load_tensor(path)
        assert back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()


def test_tensor_round_trip_keeps_special_values(tmp_path):
    arr = np.array([0.0, -0.0, np.inf, -np.inf, np.nan, 1e-308, 1e308])
    path = str(tmp_path / "special.mnt1")
    serialization.save_tensor(path, arr)
    back = serialization.load_tensor(path)
    assert back.tobytes() == arr.tobytes()


def test_tensor_record_rejects_bad_magic(tmp_path):
    path = str(tmp_path / "bad.mnt1")
    serialization.save_tensor(path, np.zeros(3))
    blob = bytearray(open(path, "rb").read())
    blob[:4] = b"XXXX"
    open(path, "wb").write(bytes(blob))
    with pytest.raises(FormatError):
        serialization.load_tensor(path)


def test_tensor_record_rejects_truncation(tmp_path):
    path = str(tmp_path / "short.mnt1")
    serialization.save_tensor(path, np.arange(10.0))
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-8])
    with pytest.raises(FormatError):
        serialization.load_tensor(path)


def test_multiple_records_in_one_stream():
    buf = io.BytesIO()
    a = np.arange(6.0).reshape(2, 3)
    b = np.arange(4.0)
    serialization.write_tensor(buf, a)
    serialization.write_tensor(buf, b)
    buf.seek(0)
    assert np.array_equal(serialization.read_tensor(buf), a)
    assert np.array_equal(serialization.read_tensor(buf), b)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_preserves_order_and_bytes(tmp_path):
    rng = np.random.default_rng(1)
    params = {
        "alpha.w": rng.standard_normal((3, 2)),
        "beta.b": rng.standard_normal(4),
        "gamma": rng.standard_normal((1,)),
    }
    path = str(tmp_path / "model.mint")
    serialization.save_checkpoint(path, params)
    back = serialization.load_checkpoint(path)
    assert list(back.keys()) == list(params.keys())
    for name, arr in params.items():
        assert back[name].tobytes() == arr.tobytes()


def test_checkpoint_rejects_wrong_magic_and_version(tmp_path):
    path = str(tmp_path / "model.mint")
    serialization.save_checkpoint(path, {"w": np.zeros(2)})
    blob = bytearray(open(path, "rb").read())

    bad = bytes(b"YYYY") + bytes(blob[4:])
    open(path, "wb").write(bad)
    with pytest.raises(FormatError):
        serialization.load_checkpoint(path)

    blob2 = bytearray(open_checkpoint_bytes(tmp_path))
    blob2[4] = 99   # format version field
    open(path, "wb").write(bytes(blob2))
    with pytest.raises(FormatError):
        serialization.load_checkpoint(path)


def open_checkpoint_bytes(tmp_path):
    path = str(tmp_path / "fresh.mint")
    serialization.save_checkpoint(path, {"w": np.zeros(2)})
    return open(path, "rb").read()


def test_checkpoint_rejects_truncation(tmp_path):
    path = str(tmp_path / "model.mint")
    serialization.save_checkpoint(path, {"w": np.arange(8.0)})
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-16])
    with pytest.raises(FormatError):
        serialization.load_checkpoint(path)


# ---------------------------------------------------------------------------
# configs


def test_config_round_trip_with_types(tmp_path):
    path = str(tmp_path / "config.txt")
    pairs = {"epochs": 30, "lr": 1e-3, "variant": "full", "quiet": False,
             "dataset_root": "/tmp/ds"}
    serialization.save_config(path, pairs)
    back = serialization.load_config(path)
    assert back == pairs
    assert isinstance(back["epochs"], int)
    assert isinstance(back["lr"], float)
    assert isinstance(back["quiet"], bool)


def test_config_rejects_malformed_lines(tmp_path):
    path = str(tmp_path / "config.txt")
    with open(path, "w", encoding="utf-8") as f:
        f.write("epochs=3\nnot a key value line\n")
    with pytest.raises(FormatError):
        serialization.load_config(path)


# ---------------------------------------------------------------------------
# pgm images


def test_pgm_round_trip_and_comments(tmp_path):
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, (9, 13))
    path = str(tmp_path / "img.pgm")
    serialization.write_pgm(path, img)
    back = serialization.read_pgm(path)
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 0.5 / 255.0 + 1e-12

    blob = open(path, "rb").read()
    commented = blob[:2] + b"\n# a comment\n" + blob[2:]
    path2 = str(tmp_path / "commented.pgm")
    open(path2, "wb").write(commented)
    assert np.array_equal(serialization.read_pgm(path2), back)


def test_pgm_clips_out_of_range_values(tmp_path):
    path = str(tmp_path / "clip.pgm")
    serialization.write_pgm(path, np.array([[-0.5, 0.0], [1.0, 2.0]]))
    back = serialization.read_pgm(path)
    assert back[0, 0] == 0.0
    assert back[1, 0] == 1.0
    assert back[1, 1] == 1.0
