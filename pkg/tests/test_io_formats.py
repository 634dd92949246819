import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from defocus_restore.errors import DimensionError, FormatError
from defocus_restore.io_formats import (encode_pgm, format_number, parse_pgm, read_csv, read_pgm, write_csv,
                                        write_pgm)


def test_examples():
    assert parse_pgm(b"P5\n1 1\n65535\n\x12\x34").tolist() == [[4660]]
    assert parse_pgm(b"P5 1 1 255\n\xff").tolist() == [[65535]]
    assert parse_pgm(b"P5\n# comment\n2 1 # trailing\n255\n\x01\x02").tolist() == [[257, 514]]
    img = np.zeros((520, 696), dtype=np.uint16)
    assert encode_pgm(img).startswith(b"P5\n696 520\n65535\n")
    assert len(encode_pgm(img)) == len(b"P5\n696 520\n65535\n") + 2 * 696 * 520


@pytest.mark.parametrize("blob,offset", [
    (b"P2\n1 1\n65535\n\x00\x00", 0),
    (b"P5\n1 1\n1000\n\x00\x00", 7),
    (b"P5\n2 2\n65535\n\x00\x00\x00", 16),
    (b"P5\n2 2\n255\n\x00", 12),
])
def test_format_errors_carry_offsets(blob, offset):
    with pytest.raises(FormatError) as info:
        parse_pgm(blob)
    assert info.value.offset == offset
    assert f"offset {offset}" in str(info.value)


def test_zero_sized_rejected(tmp_path):
    with pytest.raises(DimensionError):
        write_pgm(np.zeros((0, 3), dtype=np.uint16), str(tmp_path / "x.pgm"))
    assert not (tmp_path / "x.pgm").exists()


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint16, st.tuples(st.integers(1, 20), st.integers(1, 20))))
def test_round_trip(img):
    assert np.array_equal(parse_pgm(encode_pgm(img)), img)
    assert encode_pgm(parse_pgm(encode_pgm(img))) == encode_pgm(img)


def test_file_round_trip(tmp_path, rng):
    img = rng.integers(0, 65536, (13, 17)).astype(np.uint16)
    path = str(tmp_path / "a.pgm")
    write_pgm(img, path)
    assert np.array_equal(read_pgm(path), img)


def test_csv(tmp_path):
    path = tmp_path / "t.csv"
    write_csv(str(path), ["a", "b", "c"], [[1, 0.1, float("inf")], [np.int64(3), np.float32(0.5), "x"]])
    assert path.read_bytes() == b"a,b,c\n1,0.1,inf\n3,0.5,x\n"
    assert read_csv(str(path)) == (["a", "b", "c"], [["1", "0.1", "inf"], ["3", "0.5", "x"]])
    assert format_number(float("-inf")) == "-inf"


def test_read_pgm_keeps_offset(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P5\n2 2\n65535\n\x00")
    with pytest.raises(FormatError) as info:
        read_pgm(str(path))
    assert info.value.offset == 14 and str(path) in str(info.value)
