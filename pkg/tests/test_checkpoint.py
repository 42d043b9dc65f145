import struct
import zlib

import numpy as np
import pytest

from aquila import checkpoint
from aquila.errors import BadMagicError, ChecksumError, FormatError, TruncatedFileError


@pytest.fixture
def tensors(rng):
    return {
        "a.w": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.standard_normal(5),
        "scalar": np.array(2.5),
    }


def test_round_trip_is_bit_exact(tmp_path, tensors):
    path = tmp_path / "x.ckpt"
    checkpoint.save(path, tensors)
    back = checkpoint.load(path)
    assert list(back) == list(tensors)
    for name, arr in tensors.items():
        assert back[name].dtype == arr.dtype and back[name].shape == arr.shape
        assert back[name].tobytes() == arr.tobytes()


def test_layout(tensors):
    raw = checkpoint.encode({"w": np.zeros((2,), dtype=np.float32)})
    assert raw[:4] == b"AQSF"
    assert struct.unpack("<II", raw[4:12]) == (1, 1)
    assert struct.unpack("<H", raw[12:14]) == (1,) and raw[14:15] == b"w"
    assert raw[15] == 1 and struct.unpack("<Q", raw[16:24]) == (2,) and raw[24] == 0
    assert struct.unpack("<I", raw[-4:]) == (zlib.crc32(raw[:-4]),)


def test_truncation_is_detected(tensors):
    raw = checkpoint.encode(tensors)
    for cut in (20, len(raw) // 2, len(raw) - 5):
        with pytest.raises(TruncatedFileError):
            checkpoint.decode(raw[:cut])


def test_flipped_byte_is_a_checksum_error(tensors):
    raw = bytearray(checkpoint.encode(tensors))
    raw[-10] ^= 0xFF
    with pytest.raises(ChecksumError):
        checkpoint.decode(bytes(raw))


def test_bad_magic(tensors):
    raw = checkpoint.encode(tensors)
    with pytest.raises(BadMagicError):
        checkpoint.decode(b"NOPE" + raw[4:])


def test_error_kinds_are_distinct():
    kinds = {TruncatedFileError, ChecksumError, BadMagicError}
    assert len(kinds) == 3 and all(issubclass(k, FormatError) for k in kinds)


def test_unsupported_dtype():
    with pytest.raises(FormatError):
        checkpoint.encode({"i": np.arange(3)})


def test_failed_write_leaves_no_partial_file(tmp_path):
    path = tmp_path / "x.ckpt"
    with pytest.raises(FormatError):
        checkpoint.save(path, {"ok": np.zeros(2), "bad": np.arange(2)})
    assert list(tmp_path.iterdir()) == []
