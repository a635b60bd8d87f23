"""
Flat binary format shared by attention maps, tensors and network parameters.

A record is a header of little-endian int32 values followed by the payload as
row-major little-endian float32 values. Multi-record files simply concatenate
records; the reader is told how many header ints each record carries.
"""

import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from src.core.utils import InvalidInputError

_INT = np.dtype("<i4")
_FLOAT = np.dtype("<f4")


def pack_record(header: Sequence[int], data: np.ndarray) -> bytes:
    """Encode one header + float32 payload record."""
    head = np.asarray(header, dtype=_INT)
    body = np.ascontiguousarray(data, dtype=_FLOAT)
    return head.tobytes() + body.tobytes()


def unpack_record(
    buf: Union[bytes, memoryview], header_len: int, offset: int = 0, dim_count: Optional[int] = None
) -> Tuple[List[int], np.ndarray, int]:
    """
    Decode one record whose payload size is the product of its leading header dims.

    Args:
        buf: Encoded bytes
        header_len: Number of int32 values in the header
        offset: Byte offset of the record inside buf
        dim_count: How many leading header values are payload dims (default: all)

    Returns:
        Tuple of (header ints, float32 payload reshaped to the header dims,
        offset just past the record)

    Raises:
        InvalidInputError: If buf is truncated or the header is negative
    """
    head_bytes = header_len * _INT.itemsize
    if len(buf) < offset + head_bytes:
        raise InvalidInputError("Truncated record header")
    header = np.frombuffer(buf, dtype=_INT, count=header_len, offset=offset).tolist()
    if any(d < 0 for d in header):
        raise InvalidInputError(f"Negative dimension in record header {header}")
    dims = header[: header_len if dim_count is None else dim_count]
    count = math.prod(dims) if dims else 0
    start = offset + head_bytes
    end = start + count * _FLOAT.itemsize
    if len(buf) < end:
        raise InvalidInputError(f"Truncated record payload: need {end} bytes, have {len(buf)}")
    data = np.frombuffer(buf, dtype=_FLOAT, count=count, offset=start).reshape(dims if dims else (0,)).copy()
    return header, data, end


def write_bytes(path: Union[str, Path], payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    return path


def run_length_encode(grid: np.ndarray) -> List[int]:
    """
    Run-length encode a binary grid in row-major order.

    Runs alternate between 0 and 1 and always start with a (possibly empty)
    run of zeros.
    """
    flat = np.asarray(grid, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def run_length_decode(runs: Sequence[int], shape: Tuple[int, int]) -> np.ndarray:
    """Inverse of run_length_encode."""
    total = int(sum(runs))
    if total != shape[0] * shape[1]:
        raise InvalidInputError(f"Run lengths cover {total} cells, expected {shape[0] * shape[1]}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)
