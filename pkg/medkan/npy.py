"""Reader and writer for the NPY array container (versions 1.0 and 2.0).

Preamble and header go through :mod:`numpy.lib.format`; this module adds the
strict subset accepted for datasets and logit dumps.
"""
from __future__ import annotations

import io
import tokenize
from dataclasses import dataclass

import numpy as np
from numpy.lib import format as npy_format

from .errors import NpyFormatError

MAGIC = npy_format.MAGIC_PREFIX
SUPPORTED_DESCR = {
    "|u1": np.dtype("u1"),
    "<i8": np.dtype("<i8"),
    "<f4": np.dtype("<f4"),
    "<f8": np.dtype("<f8"),
}
_HEADER_READERS = {
    (1, 0): npy_format.read_array_header_1_0,
    (2, 0): npy_format.read_array_header_2_0,
}


@dataclass(frozen=True)
class NpyArray:
    descr: str
    fortran_order: bool
    shape: tuple[int, ...]
    buffer: bytes

    @property
    def dtype(self) -> np.dtype:
        return SUPPORTED_DESCR[self.descr]

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.buffer, dtype=self.dtype).reshape(self.shape).copy()


def parse_npy(data: bytes) -> NpyArray:
    """Validate and split an NPY buffer into header fields and payload."""
    stream = io.BytesIO(data)
    try:
        version = npy_format.read_magic(stream)
    except ValueError as exc:
        raise NpyFormatError(f"Not an NPY file: bad magic ({exc})") from exc
    reader = _HEADER_READERS.get(version)
    if reader is None:
        raise NpyFormatError(f"Unsupported NPY version {version[0]}.{version[1]}")
    try:
        shape, fortran, dtype = reader(stream)
    except (ValueError, TypeError, SyntaxError, tokenize.TokenError) as exc:
        raise NpyFormatError(f"Malformed NPY header: {exc}") from exc

    descr = dtype.str
    if descr not in SUPPORTED_DESCR:
        raise NpyFormatError(f"Unsupported NPY dtype '{descr}' (little-endian u1, i8, f4, f8 only)")
    if fortran:
        raise NpyFormatError("Fortran-ordered NPY arrays are not supported; save them in C order")

    payload = data[stream.tell():]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise NpyFormatError(
            f"NPY payload length mismatch: shape {shape} needs {expected} bytes, found {len(payload)}"
        )
    return NpyArray(descr=descr, fortran_order=False, shape=tuple(shape), buffer=bytes(payload))


def serialize_npy(array: np.ndarray) -> bytes:
    """Version 1.0 NPY bytes; numpy pads the header to a 64-byte boundary."""
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
    if np.dtype(dtype).str not in SUPPORTED_DESCR:
        raise NpyFormatError(f"Cannot write dtype {array.dtype} (u1, i8, f4, f8 only)")
    body = np.ascontiguousarray(array, dtype=dtype)
    stream = io.BytesIO()
    npy_format.write_array_header_1_0(stream, npy_format.header_data_from_array_1_0(body))
    stream.write(body.tobytes())
    return stream.getvalue()


__all__ = ["MAGIC", "NpyArray", "parse_npy", "serialize_npy"]
