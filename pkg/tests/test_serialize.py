import numpy as np
import pytest

from ccnn.errors import FormatError
from ccnn.serialize import (
    FEATURE_MAGIC,
    MODEL_MAGIC,
    Reader,
    Writer,
    checked_payload,
    load_features,
    save_features,
)


def test_writer_reader_scalar_round_trip():
    w = Writer()
    w.u8(7)
    w.u16(65535)
    w.u32(123456789)
    w.text("grüße ✓")
    w.json({"b": 2, "a": [1, None, "x"]})
    data = w.finish_with_crc()
    r = Reader(data[:-4], "test")
    assert r.u8() == 7
    assert r.u16() == 65535
    assert r.u32() == 123456789
    assert r.text() == "grüße ✓"
    assert r.json() == {"b": 2, "a": [1, None, "x"]}
    assert r.done()


def test_array_round_trip_dtypes(rng):
    arrays = [
        rng.normal(size=(3, 4)).astype(np.float32),
        rng.normal(size=(2, 3, 2)).astype(np.float64),
        rng.integers(-5, 5, size=7).astype(np.int64),
        np.zeros((0, 3)),
    ]
    w = Writer()
    for a in arrays:
        w.array(a)
    r = Reader(w.finish_with_crc()[:-4], "test")
    for a in arrays:
        back = r.array()
        assert back.dtype == a.dtype
        assert back.shape == a.shape
        np.testing.assert_array_equal(back, a)
    assert r.done()


def test_array_rejects_unknown_dtype():
    w = Writer()
    with pytest.raises(ValueError):
        w.array(np.zeros(3, dtype=np.int32))


def test_reader_rejects_unknown_tag_and_truncation():
    w = Writer()
    w.array(np.zeros(2))
    raw = w.finish_with_crc()[:-4]
    data = bytearray(raw)
    data[0] = 99  # invalid dtype tag
    with pytest.raises(FormatError, match="tag"):
        Reader(bytes(data), "test").array()
    with pytest.raises(FormatError, match="truncated"):
        Reader(raw[:-2], "test").array()


def test_checked_payload_magic_and_crc(tmp_path):
    w = Writer()
    w.raw(MODEL_MAGIC)
    w.u32(42)
    data = w.finish_with_crc()
    payload = checked_payload(data, MODEL_MAGIC, "f")
    assert Reader(payload, "f").u32() == 42

    with pytest.raises(FormatError, match="magic"):
        checked_payload(data, FEATURE_MAGIC, "f")
    corrupt = bytearray(data)
    corrupt[5] ^= 0xFF
    with pytest.raises(FormatError, match="checksum"):
        checked_payload(bytes(corrupt), MODEL_MAGIC, "f")
    with pytest.raises(FormatError, match="truncated"):
        checked_payload(data[:6], MODEL_MAGIC, "f")


def test_feature_file_round_trip(tmp_path, rng):
    H = rng.normal(size=(5, 3, 4, 4)).astype(np.float32)
    path = tmp_path / "f.ccnf"
    save_features(path, H)
    back = load_features(path)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, H)


def test_feature_file_float64_input_is_cast(tmp_path, rng):
    H = rng.normal(size=(2, 1, 3, 3))
    path = tmp_path / "f.ccnf"
    save_features(path, H)
    back = load_features(path)
    np.testing.assert_array_equal(back, H.astype(np.float32))


def test_feature_file_rejects_corruption(tmp_path, rng):
    H = rng.normal(size=(2, 1, 3, 3)).astype(np.float32)
    path = tmp_path / "f.ccnf"
    save_features(path, H)
    raw = bytearray(path.read_bytes())
    raw[10] ^= 0x01
    bad = tmp_path / "bad.ccnf"
    bad.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="checksum"):
        load_features(bad)
    bad.write_bytes(path.read_bytes() + b"zz")
    with pytest.raises(FormatError):
        load_features(bad)
    bad.write_bytes(path.read_bytes()[:8])
    with pytest.raises(FormatError, match="truncated"):
        load_features(bad)


def test_feature_file_rejects_non_4d(tmp_path, rng):
    with pytest.raises(ValueError):
        save_features(tmp_path / "f.ccnf", rng.normal(size=(3, 4)))
