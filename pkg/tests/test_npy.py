"""NPY container parsing and writing."""
import io
import struct

import numpy as np
import pytest
from numpy.lib import format as npy_format

from medkan.errors import DataError, NpyFormatError
from medkan.npy import MAGIC, parse_npy, serialize_npy


def _npy_v1(header: str, payload: bytes = b"") -> bytes:
    encoded = header.encode("latin1")
    return MAGIC + bytes([1, 0]) + struct.pack("<H", len(encoded)) + encoded + payload


def _saved(array, **kwargs) -> bytes:
    buffer = io.BytesIO()
    np.save(buffer, array, **kwargs)
    return buffer.getvalue()


class TestParse:
    def test_minimal_v1(self):
        data = _npy_v1("{'descr': '|u1', 'fortran_order': False, 'shape': (2, 3), }\n", bytes(range(6)))
        parsed = parse_npy(data)
        assert parsed.shape == (2, 3)
        np.testing.assert_array_equal(parsed.to_array(), np.arange(6, dtype=np.uint8).reshape(2, 3))

    def test_version_two(self):
        header = b"{'descr': '<f8', 'fortran_order': False, 'shape': (3,), }\n"
        data = MAGIC + bytes([2, 0]) + struct.pack("<I", len(header)) + header + np.arange(3.0).tobytes()
        np.testing.assert_array_equal(parse_npy(data).to_array(), [0.0, 1.0, 2.0])

    def test_scalar_shape(self):
        data = _npy_v1("{'descr': '<i8', 'fortran_order': False, 'shape': (), }\n", struct.pack("<q", -7))
        assert parse_npy(data).to_array() == -7

    @pytest.mark.parametrize("array", [
        np.arange(12, dtype=np.uint8).reshape(3, 4),
        np.arange(5, dtype=np.int64),
        np.linspace(0, 1, 6, dtype=np.float32).reshape(2, 3),
        np.linspace(-1, 1, 8).reshape(2, 2, 2),
    ])
    def test_reads_numpy_output(self, array):
        parsed = parse_npy(_saved(array)).to_array()
        assert parsed.dtype == array.dtype
        np.testing.assert_array_equal(parsed, array)

    def test_version_two_from_numpy_writer(self):
        array = np.arange(6, dtype=np.float32).reshape(3, 2)
        buffer = io.BytesIO()
        npy_format.write_array_header_2_0(buffer, npy_format.header_data_from_array_1_0(array))
        buffer.write(array.tobytes())
        parsed = parse_npy(buffer.getvalue())
        assert parsed.descr == "<f4"
        np.testing.assert_array_equal(parsed.to_array(), array)

    @pytest.mark.parametrize("array", [np.arange(7, dtype=np.uint8), np.linspace(0, 1, 12).reshape(3, 4)])
    def test_matches_numpy_save(self, array):
        assert serialize_npy(array) == _saved(array)

    def test_numpy_reads_our_output(self):
        array = np.arange(10, dtype=np.int64).reshape(2, 5)
        data = serialize_npy(array)
        np.testing.assert_array_equal(np.load(io.BytesIO(data)), array)
        assert (data.index(b"\n") + 1) % 64 == 0


class TestRejects:
    def test_too_short(self):
        with pytest.raises(NpyFormatError):
            parse_npy(b"\x93NUMP")

    def test_bad_magic(self):
        with pytest.raises(NpyFormatError, match="magic"):
            parse_npy(b"\x93NUMPZ" + bytes(10))

    def test_unknown_version(self):
        with pytest.raises(NpyFormatError, match="version"):
            parse_npy(MAGIC + bytes([3, 0]) + bytes(10))

    def test_fortran_order(self):
        with pytest.raises(NpyFormatError, match="Fortran"):
            parse_npy(_saved(np.asfortranarray(np.arange(6.0).reshape(2, 3))))

    def test_unsupported_dtype(self):
        with pytest.raises(NpyFormatError, match="dtype"):
            parse_npy(_saved(np.arange(3, dtype=np.int16)))

    def test_big_endian(self):
        with pytest.raises(NpyFormatError):
            parse_npy(_saved(np.arange(3, dtype=">f8")))

    def test_payload_length(self):
        with pytest.raises(NpyFormatError, match="mismatch"):
            parse_npy(_saved(np.arange(4, dtype=np.int64))[:-1])

    def test_header_overruns_file(self):
        with pytest.raises(NpyFormatError):
            parse_npy(MAGIC + bytes([1, 0]) + struct.pack("<H", 500) + b"{}")

    def test_malformed_header(self):
        with pytest.raises(NpyFormatError):
            parse_npy(_npy_v1("{'descr': '<f8', 'fortran_order': False, 'shape': (1,)"))

    def test_extra_header_keys(self):
        with pytest.raises(NpyFormatError):
            parse_npy(_npy_v1("{'descr': '<f8', 'fortran_order': False, 'shape': (0,), 'x': 1}"))

    def test_format_error_is_a_data_error(self):
        assert issubclass(NpyFormatError, DataError)

    def test_cannot_write_unsupported_dtype(self):
        with pytest.raises(NpyFormatError):
            serialize_npy(np.zeros(2, dtype=np.complex64))
