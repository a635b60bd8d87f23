"""
Dense and mask-guided 2D convolution through patch-matrix assembly.

Input tensors are C x H x W arrays, weight matrices are c_out x (c_in * K^2)
with columns ordered (c, ky, kx). A convolution mask marks output positions;
the masked path gathers only those rows of the patch matrix, multiplies them
and scatters the results back.

Both paths accumulate every output element over the columns in the same
ascending order, so masked outputs equal dense outputs bit for bit.
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from src.core.config import ConvSpec
from src.core.serialization import pack_record, unpack_record, write_bytes
from src.core.utils import InvalidInputError, chunk_bounds, ordered_map

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlopCount:
    """Multiply-accumulate counts of one convolution, dense and masked."""

    dense: int
    masked: int
    active: int
    positions: int

    @property
    def density(self) -> float:
        return self.active / self.positions if self.positions else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {"dense": self.dense, "masked": self.masked, "density": self.density}


@dataclass(frozen=True)
class ConvTiming:
    """One wall-clock comparison row."""

    spec: str
    density: float
    dense_flops: int
    masked_flops: int
    dense_ms: float
    masked_ms: float

    def to_row(self) -> Dict[str, Any]:
        return {
            "spec": self.spec,
            "density": f"{self.density:.6f}",
            "dense_flops": self.dense_flops,
            "masked_flops": self.masked_flops,
            "dense_ms": f"{self.dense_ms:.3f}",
            "masked_ms": f"{self.masked_ms:.3f}",
        }


TIMING_HEADER = ["spec", "density", "dense_flops", "masked_flops", "dense_ms", "masked_ms"]


def describe_spec(spec: ConvSpec) -> str:
    return f"{spec.c_in}x{spec.kernel}x{spec.kernel}->{spec.c_out}/s{spec.stride}p{spec.padding}"


def _check_input(x: np.ndarray, spec: ConvSpec) -> Tuple[int, int]:
    if x.ndim != 3:
        raise InvalidInputError(f"Input must be C x H x W, got shape {x.shape}")
    if x.shape[0] != spec.c_in:
        raise InvalidInputError(f"Input has {x.shape[0]} channels, spec expects {spec.c_in}")
    h_out, w_out = spec.output_dims(x.shape[1], x.shape[2])
    if h_out < 1 or w_out < 1:
        raise InvalidInputError(f"Input {x.shape[1:]} is too small for a {spec.kernel}x{spec.kernel} kernel")
    return h_out, w_out


def _check_weights(weights: np.ndarray, spec: ConvSpec) -> None:
    if weights.shape != (spec.c_out, spec.columns):
        raise InvalidInputError(f"Weights must be {spec.c_out} x {spec.columns}, got {weights.shape}")


def _check_mask(mask: np.ndarray, out_dims: Tuple[int, int]) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != out_dims:
        raise InvalidInputError(f"Mask shape {mask.shape} does not match output dims {out_dims}")
    return mask


def _tap_offsets(spec: ConvSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Channel, row and column offset of every patch-matrix column, in (c, ky, kx) order."""
    c, ky, kx = np.meshgrid(np.arange(spec.c_in), np.arange(spec.kernel), np.arange(spec.kernel), indexing="ij")
    return c.ravel(), ky.ravel(), kx.ravel()


def _patch_indices(rows: np.ndarray, w_out: int, spec: ConvSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    c, ky, kx = _tap_offsets(spec)
    y0 = (rows // w_out) * spec.stride
    x0 = (rows % w_out) * spec.stride
    return c[None, :], y0[:, None] + ky[None, :], x0[:, None] + kx[None, :]


def _padded(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    p = spec.padding
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def im2col(x: np.ndarray, spec: ConvSpec, rows: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Unroll sliding-window patches into a matrix.

    Args:
        x: C x H x W input
        spec: Convolution layer
        rows: Output positions (row-major indices) to unroll; all when None

    Returns:
        (len(rows) or H_out * W_out) x (c_in * K^2) matrix; taps falling in
        the zero padding are 0

    Raises:
        InvalidInputError: If the input does not match the conv spec
    """
    x = np.asarray(x)
    h_out, w_out = _check_input(x, spec)
    if rows is None:
        rows = np.arange(h_out * w_out)
    c, y, xs = _patch_indices(np.asarray(rows, dtype=np.int64), w_out, spec)
    return _padded(x, spec)[c, y, xs]


def _accumulate(cols: np.ndarray, weights: np.ndarray, dtype: np.dtype) -> np.ndarray:
    # One column at a time: every element sums its products in (c, ky, kx)
    # order whatever rows are present.
    out = np.zeros((cols.shape[0], weights.shape[0]), dtype=dtype)
    for j in range(cols.shape[1]):
        out += cols[:, j, None] * weights[None, :, j]
    return out


def _compute_rows(
    x: np.ndarray, weights: np.ndarray, spec: ConvSpec, rows: np.ndarray, workers: int
) -> np.ndarray:
    dtype = np.result_type(x.dtype, weights.dtype, np.float32)
    x = x.astype(dtype, copy=False)
    weights = weights.astype(dtype, copy=False)

    def _block(block: range) -> np.ndarray:
        return _accumulate(im2col(x, spec, rows[block.start : block.stop]), weights, dtype)

    blocks = list(chunk_bounds(len(rows), workers))
    if not blocks:
        return np.zeros((0, spec.c_out), dtype=dtype)
    return np.concatenate(ordered_map(_block, blocks, workers), axis=0)


def dense_conv(x: np.ndarray, weights: np.ndarray, spec: ConvSpec, workers: int = 1) -> np.ndarray:
    """
    Convolve every output position.

    Raises:
        InvalidInputError: If input or weights do not match the conv spec
    """
    x = np.asarray(x)
    weights = np.asarray(weights)
    h_out, w_out = _check_input(x, spec)
    _check_weights(weights, spec)
    out = _compute_rows(x, weights, spec, np.arange(h_out * w_out), workers)
    return out.T.reshape(spec.c_out, h_out, w_out)


def masked_conv(
    x: np.ndarray, weights: np.ndarray, spec: ConvSpec, mask: np.ndarray, workers: int = 1
) -> np.ndarray:
    """
    Convolve only the output positions where mask is set; the rest are 0.

    Args:
        x: C x H x W input
        weights: c_out x (c_in * K^2) filter matrix
        spec: Convolution layer
        mask: Binary H_out x W_out grid of output positions
        workers: Threads sharing the gathered rows

    Raises:
        InvalidInputError: On any shape mismatch
    """
    x = np.asarray(x)
    weights = np.asarray(weights)
    h_out, w_out = _check_input(x, spec)
    _check_weights(weights, spec)
    mask = _check_mask(mask, (h_out, w_out))

    rows = np.flatnonzero(mask.ravel())
    gathered = _compute_rows(x, weights, spec, rows, workers)
    out = np.zeros((h_out * w_out, spec.c_out), dtype=gathered.dtype)
    out[rows] = gathered
    return out.T.reshape(spec.c_out, h_out, w_out)


def flops(spec: ConvSpec, out_dims: Tuple[int, int], mask: Optional[np.ndarray] = None) -> FlopCount:
    """
    Exact multiply-accumulate counts for one layer.

    Dense cost is H_out * W_out * c_in * K^2 * c_out; masked cost counts only
    the active output positions.
    """
    h_out, w_out = out_dims
    positions = h_out * w_out
    per_position = spec.columns * spec.c_out
    active = positions if mask is None else int(np.count_nonzero(_check_mask(mask, (h_out, w_out))))
    return FlopCount(dense=positions * per_position, masked=active * per_position, active=active, positions=positions)


def conv_backward(
    x: np.ndarray, weights: np.ndarray, spec: ConvSpec, output_grad: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradients of the dense convolution.

    Returns:
        Tuple of (weight gradient c_out x (c_in * K^2), input gradient C x H x W)

    Raises:
        InvalidInputError: On any shape mismatch
    """
    x = np.asarray(x)
    weights = np.asarray(weights)
    output_grad = np.asarray(output_grad)
    h_out, w_out = _check_input(x, spec)
    _check_weights(weights, spec)
    if output_grad.shape != (spec.c_out, h_out, w_out):
        raise InvalidInputError(f"Output gradient must be {(spec.c_out, h_out, w_out)}, got {output_grad.shape}")

    dtype = np.result_type(x.dtype, weights.dtype, output_grad.dtype, np.float32)
    cols = im2col(x, spec).astype(dtype, copy=False)
    grad_rows = output_grad.reshape(spec.c_out, -1).T.astype(dtype, copy=False)

    weight_grad = grad_rows.T @ cols
    cols_grad = grad_rows @ weights.astype(dtype, copy=False)

    p = spec.padding
    padded_grad = np.zeros((x.shape[0], x.shape[1] + 2 * p, x.shape[2] + 2 * p), dtype=dtype)
    c, y, xs = _patch_indices(np.arange(h_out * w_out), w_out, spec)
    np.add.at(padded_grad, (np.broadcast_to(c, y.shape), y, xs), cols_grad)
    input_grad = padded_grad[:, p : p + x.shape[1], p : p + x.shape[2]]
    return weight_grad, np.ascontiguousarray(input_grad)


def random_mask(shape: Tuple[int, int], density: float, rng: np.random.Generator) -> np.ndarray:
    """Binary grid with exactly round(density * cells) active cells at random positions."""
    total = shape[0] * shape[1]
    active = int(round(min(max(density, 0.0), 1.0) * total))
    mask = np.zeros(total, dtype=bool)
    mask[rng.choice(total, size=active, replace=False)] = True
    return mask.reshape(shape)


def tensor_to_bytes(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    return pack_record(list(x.shape), x)


def tensor_from_bytes(buf: bytes, ndim: int = 3) -> np.ndarray:
    _, data, _ = unpack_record(buf, header_len=ndim)
    return data


def save_tensor(path: Union[str, Path], x: np.ndarray) -> Path:
    return write_bytes(path, tensor_to_bytes(x))


def load_tensor(path: Union[str, Path], ndim: int = 3) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes(), ndim)


def time_conv(
    spec: ConvSpec,
    input_dims: Tuple[int, int],
    density: float,
    seed: int = 0,
    repeats: int = 3,
    workers: int = 1,
) -> ConvTiming:
    """
    Time dense and masked convolution on one seeded random instance.

    Wall-clock values are informational; the FLOP columns are exact.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((spec.c_in, *input_dims)).astype(np.float32)
    weights = rng.standard_normal((spec.c_out, spec.columns)).astype(np.float32)
    out_dims = spec.output_dims(*input_dims)
    mask = random_mask(out_dims, density, rng)

    def _best(fn) -> float:
        best = float("inf")
        for _ in range(max(repeats, 1)):
            start = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - start)
        return best * 1000.0

    dense_ms = _best(lambda: dense_conv(x, weights, spec, workers))
    masked_ms = _best(lambda: masked_conv(x, weights, spec, mask, workers))
    count = flops(spec, out_dims, mask)
    logger.info(
        f"{describe_spec(spec)} at density {count.density:.3f}: dense {dense_ms:.2f} ms, masked {masked_ms:.2f} ms"
    )
    return ConvTiming(
        spec=describe_spec(spec),
        density=count.density,
        dense_flops=count.dense,
        masked_flops=count.masked,
        dense_ms=dense_ms,
        masked_ms=masked_ms,
    )
