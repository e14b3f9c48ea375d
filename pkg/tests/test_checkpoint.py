import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ccpf.checkpoint import MAGIC, decode, encode, load_checkpoint, save_checkpoint
from ccpf.errors import CheckpointError


def sample():
    meta = {"kind": "pmf", "kappa": 0.25, "nested": {"a": [1, 2]}}
    arrays = {"b": np.arange(6, dtype=np.int64).reshape(2, 3), "a": np.linspace(0, 1, 5), "s": np.array(3.5)}
    return meta, arrays


def test_save_load_save_is_byte_identical(tmp_path):
    meta, arrays = sample()
    p, q = tmp_path / "a.ccpf", tmp_path / "b.ccpf"
    save_checkpoint(p, meta, arrays)
    m, a = load_checkpoint(p)
    assert m == meta
    for k in arrays:
        assert np.array_equal(a[k], arrays[k]) and a[k].shape == arrays[k].shape
    save_checkpoint(q, m, a)
    assert p.read_bytes() == q.read_bytes()
    assert not (tmp_path / "a.ccpf.tmp").exists()


@settings(max_examples=50, deadline=None)
@given(arr=hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
       ints=hnp.arrays(np.int64, hnp.array_shapes(max_dims=2, max_side=5)))
def test_round_trip_property(arr, ints):
    m, a = decode(encode({"x": 1}, {"f": arr, "i": ints}))
    assert m == {"x": 1}
    assert np.array_equal(a["f"], arr, equal_nan=True)
    assert np.array_equal(a["i"], ints)
    assert encode(m, a) == encode({"x": 1}, {"f": arr, "i": ints})


def test_tampered_shape_is_rejected():
    meta, arrays = sample()
    buf = bytearray(encode(meta, arrays))
    text = buf[12:12 + struct.unpack("<I", buf[8:12])[0]]
    bad = bytes(text).replace(b'"b":[2,3]', b'"b":[3,2]')
    assert bad != bytes(text)
    buf[12:12 + len(text)] = bad
    with pytest.raises(CheckpointError, match="shape"):
        decode(bytes(buf))


def test_bad_magic_and_version():
    buf = encode(*sample())
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError, match="version 2"):
        decode(MAGIC + struct.pack("<I", 2) + buf[8:])


def test_truncation_and_trailing_bytes():
    buf = encode(*sample())
    for cut in (3, 10, len(buf) // 2, len(buf) - 1):
        with pytest.raises(CheckpointError):
            decode(buf[:cut])
    with pytest.raises(CheckpointError, match="trailing"):
        decode(buf + b"\0")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "none.ccpf")


def test_unsupported_dtype():
    with pytest.raises(CheckpointError):
        encode({}, {"c": np.array(["a"])})
