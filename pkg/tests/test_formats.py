import numpy as np
import pytest

from mmdrfuse import formats


def test_fnv1a_reference_vectors():
    # published 64-bit FNV-1a test vectors
    assert formats.fnv1a(b"") == 0xcbf29ce484222325
    assert formats.fnv1a(b"a") == 0xaf63dc4c8601ec8c
    assert formats.fnv1a(b"foobar") == 0x85944171f73967e8


def test_finalize_split_round_trip():
    body = b"MMDR" + bytes(range(32))
    blob = formats.finalize(bytearray(body))
    assert formats.split_checked(blob, "test blob") == body


def test_corruption_detected():
    blob = bytearray(formats.finalize(bytearray(b"MMDRxyz")))
    blob[5] ^= 0x01
    with pytest.raises(formats.FormatError, match="checksum"):
        formats.split_checked(bytes(blob), "test blob")


def test_truncation_detected():
    blob = formats.finalize(bytearray(b"MMDRxyz"))
    with pytest.raises(formats.FormatError):
        formats.split_checked(blob[:-3], "test blob")
    with pytest.raises(formats.FormatError):
        formats.split_checked(b"\x01", "test blob")


def test_reader_walks_and_validates():
    body = (b"ABCD" + formats.pack_u32(7) + formats.pack_u64(1 << 40)
            + formats.pack_f32(0.5) + formats.pack_f32_array(
                np.arange(4, dtype=np.float32)))
    r = formats.Reader(body, "stream")
    r.expect_magic(b"ABCD")
    assert r.u32() == 7
    assert r.u64() == 1 << 40
    assert r.f32() == 0.5
    np.testing.assert_array_equal(r.f32_array(4),
                                  np.arange(4, dtype=np.float32))
    r.done()


def test_reader_rejects_wrong_magic_and_overrun():
    r = formats.Reader(b"XXXX", "stream")
    with pytest.raises(formats.FormatError, match="magic"):
        r.expect_magic(b"ABCD")
    r2 = formats.Reader(b"\x00\x00", "stream")
    with pytest.raises(formats.FormatError):
        r2.u32()


def test_reader_done_rejects_trailing():
    r = formats.Reader(b"ABCD" + b"\x00", "stream")
    r.expect_magic(b"ABCD")
    with pytest.raises(formats.FormatError, match="trailing"):
        r.done()
