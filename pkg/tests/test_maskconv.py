"""
Tests for patch-matrix convolution, the masked path and FLOP accounting.
"""

import logging

import numpy as np
import pytest

from src.api.maskconv import (
    TIMING_HEADER,
    conv_backward,
    dense_conv,
    describe_spec,
    flops,
    im2col,
    load_tensor,
    masked_conv,
    random_mask,
    save_tensor,
    tensor_from_bytes,
    tensor_to_bytes,
    time_conv,
)
from src.core.config import ConvSpec
from src.core.utils import InvalidInputError

# Configure logging
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
logger = logging.getLogger(__name__)


def _instance(rng: np.random.Generator, spec: ConvSpec, h: int, w: int, dtype=np.float32):
    x = rng.standard_normal((spec.c_in, h, w)).astype(dtype)
    weights = rng.standard_normal((spec.c_out, spec.columns)).astype(dtype)
    return x, weights


def test_im2col_identity():
    """A 1x1 kernel on a single value unrolls to that value."""
    spec = ConvSpec(c_in=1, c_out=1, kernel=1)
    cols = im2col(np.array([[[5.0]]]), spec)
    assert cols.shape == (1, 1)
    assert cols[0, 0] == 5.0


def test_im2col_padding():
    """Padded taps are zero: the center row is all ones, corners keep four."""
    spec = ConvSpec(c_in=1, c_out=1, kernel=3, padding=1)
    cols = im2col(np.ones((1, 3, 3)), spec)
    assert cols.shape == (9, 9)
    assert cols[4].tolist() == [1.0] * 9
    for corner in (0, 2, 6, 8):
        assert cols[corner].sum() == 4.0
    assert cols[0].tolist() == [0, 0, 0, 0, 1, 1, 0, 1, 1]


def test_im2col_column_order():
    """Columns run over channels, then kernel rows, then kernel columns."""
    spec = ConvSpec(c_in=2, c_out=1, kernel=3, padding=0)
    x = np.arange(18, dtype=np.float64).reshape(2, 3, 3)
    cols = im2col(x, spec)
    assert cols.shape == (1, 18)
    assert cols[0].tolist() == list(range(18))


def test_im2col_stride_shape():
    """Stride 2 rows follow the output dims formula."""
    spec = ConvSpec(c_in=3, c_out=4, kernel=3, stride=2)
    cols = im2col(np.zeros((3, 11, 8)), spec)
    assert cols.shape == (6 * 4, 27)
    assert spec.output_dims(11, 8) == (6, 4)


def test_im2col_rejects_mismatch():
    """Channel counts must match the conv spec."""
    with pytest.raises(InvalidInputError):
        im2col(np.zeros((2, 4, 4)), ConvSpec(c_in=3, c_out=1))
    with pytest.raises(InvalidInputError):
        im2col(np.zeros((4, 4)), ConvSpec(c_in=1, c_out=1))


def test_dense_conv_identity():
    """A unit 1x1 kernel returns the input."""
    spec = ConvSpec(c_in=1, c_out=1, kernel=1)
    x = np.random.default_rng(0).standard_normal((1, 6, 7)).astype(np.float32)
    out = dense_conv(x, np.ones((1, 1), dtype=np.float32), spec)
    assert np.array_equal(out, x)


def test_dense_conv_box_filter():
    """All-ones 3x3 on all-ones 5x5 counts in-range taps."""
    spec = ConvSpec(c_in=1, c_out=1, kernel=3, padding=1)
    out = dense_conv(np.ones((1, 5, 5), dtype=np.float32), np.ones((1, 9), dtype=np.float32), spec)[0]
    assert out[2, 2] == 9.0
    assert out[0, 2] == 6.0
    assert out[2, 0] == 6.0
    assert out[0, 0] == 4.0
    assert out[4, 4] == 4.0


def test_dense_conv_zero_weights():
    """Zero weights give a zero output."""
    spec = ConvSpec(c_in=2, c_out=3, kernel=3)
    x, _ = _instance(np.random.default_rng(1), spec, 6, 6)
    out = dense_conv(x, np.zeros((3, 18), dtype=np.float32), spec)
    assert out.shape == (3, 6, 6)
    assert not out.any()


def test_dense_conv_matches_direct_sum():
    """The patch-matrix result matches a direct sliding-window sum."""
    rng = np.random.default_rng(2)
    spec = ConvSpec(c_in=2, c_out=3, kernel=3, stride=2, padding=1)
    x, weights = _instance(rng, spec, 7, 6, np.float64)
    out = dense_conv(x, weights, spec)
    kernels = weights.reshape(3, 2, 3, 3)
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    h_out, w_out = spec.output_dims(7, 6)
    for o in range(3):
        for i in range(h_out):
            for j in range(w_out):
                window = padded[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                assert out[o, i, j] == pytest.approx(float((window * kernels[o]).sum()), rel=1e-10, abs=1e-10)


def test_dense_conv_rejects_bad_weights():
    """Weights must be c_out x (c_in * K^2)."""
    spec = ConvSpec(c_in=2, c_out=3, kernel=3)
    with pytest.raises(InvalidInputError):
        dense_conv(np.zeros((2, 5, 5)), np.zeros((3, 9)), spec)


def test_masked_conv_full_and_empty_masks():
    """A full mask reproduces dense output, an empty mask gives zeros."""
    rng = np.random.default_rng(3)
    spec = ConvSpec(c_in=3, c_out=4, kernel=3)
    x, weights = _instance(rng, spec, 9, 10)
    dense = dense_conv(x, weights, spec)
    assert np.array_equal(masked_conv(x, weights, spec, np.ones((9, 10), dtype=bool)), dense)
    empty = masked_conv(x, weights, spec, np.zeros((9, 10), dtype=bool))
    assert empty.shape == dense.shape
    assert not empty.any()


def test_masked_conv_matches_dense_bitwise():
    """Over 100 seeded instances the masked path equals the dense path where the mask is set."""
    rng = np.random.default_rng(4)
    for trial in range(100):
        kernel = int(rng.choice([1, 3, 5]))
        spec = ConvSpec(
            c_in=int(rng.integers(1, 9)),
            c_out=int(rng.integers(1, 17)),
            kernel=kernel,
            stride=int(rng.integers(1, 3)),
        )
        h, w = (int(v) for v in rng.integers(kernel, 65, size=2))
        x, weights = _instance(rng, spec, h, w)
        mask = rng.uniform(size=spec.output_dims(h, w)) < rng.uniform()
        dense = dense_conv(x, weights, spec)
        masked = masked_conv(x, weights, spec, mask)
        assert np.array_equal(masked, np.where(mask[None], dense, 0.0)), f"Trial {trial}: {describe_spec(spec)}"
        count = flops(spec, mask.shape, mask)
        assert count.masked * count.positions == count.dense * count.active


def test_masked_conv_rejects_mask_shape():
    """The mask must match the output dims."""
    spec = ConvSpec(c_in=1, c_out=1, kernel=3, stride=2)
    with pytest.raises(InvalidInputError):
        masked_conv(np.zeros((1, 8, 8)), np.zeros((1, 9)), spec, np.ones((8, 8)))


def test_conv_deterministic_across_workers():
    """Worker count does not change a single bit."""
    rng = np.random.default_rng(5)
    spec = ConvSpec(c_in=4, c_out=8, kernel=3, stride=1)
    x, weights = _instance(rng, spec, 33, 29)
    mask = random_mask((33, 29), 0.3, rng)
    assert np.array_equal(dense_conv(x, weights, spec, workers=1), dense_conv(x, weights, spec, workers=4))
    serial = masked_conv(x, weights, spec, mask, workers=1)
    assert np.array_equal(serial, masked_conv(x, weights, spec, mask, workers=3))


def test_conv_is_linear():
    """conv(a x + b y) equals a conv(x) + b conv(y)."""
    rng = np.random.default_rng(6)
    spec = ConvSpec(c_in=3, c_out=5, kernel=3, stride=2)
    x, weights = _instance(rng, spec, 12, 12)
    y = rng.standard_normal(x.shape).astype(np.float32)
    a, b = 0.7, -1.3
    left = dense_conv(a * x + b * y, weights, spec)
    right = a * dense_conv(x, weights, spec) + b * dense_conv(y, weights, spec)
    assert np.allclose(left, right, rtol=1e-5, atol=1e-5 * np.abs(right).max())


def test_flops_examples():
    """Exact MAC counts for full, quarter and empty masks."""
    spec = ConvSpec(c_in=8, c_out=16, kernel=3)
    full = flops(spec, (64, 64))
    assert full.dense == full.masked == 4_718_592
    assert full.density == 1.0

    mask = np.zeros((64, 64), dtype=bool)
    mask[:16, :] = True
    quarter = flops(spec, (64, 64), mask)
    assert quarter.masked == 1_179_648
    assert quarter.masked * 4 == quarter.dense
    assert quarter.density == 0.25

    assert flops(spec, (64, 64), np.zeros((64, 64), dtype=bool)).masked == 0


def test_flops_ratio_equals_density():
    """Masked over dense FLOPs is the mask density."""
    rng = np.random.default_rng(7)
    spec = ConvSpec(c_in=3, c_out=7, kernel=5, stride=2)
    for density in (0.01, 0.1, 0.37, 0.9):
        mask = random_mask((40, 30), density, rng)
        count = flops(spec, (40, 30), mask)
        assert count.masked * count.positions == count.dense * count.active
        assert count.active == round(density * 1200)


def test_conv_backward_zero_grad():
    """A zero output gradient gives zero gradients."""
    rng = np.random.default_rng(8)
    spec = ConvSpec(c_in=2, c_out=3, kernel=3)
    x, weights = _instance(rng, spec, 5, 5)
    dw, dx = conv_backward(x, weights, spec, np.zeros((3, 5, 5)))
    assert dw.shape == weights.shape and not dw.any()
    assert dx.shape == x.shape and not dx.any()


def test_conv_backward_scalar():
    """For a 1x1 identity layer the weight gradient is input times output gradient."""
    spec = ConvSpec(c_in=1, c_out=1, kernel=1)
    dw, dx = conv_backward(np.array([[[3.0]]]), np.array([[2.0]]), spec, np.array([[[0.5]]]))
    assert dw[0, 0] == pytest.approx(1.5)
    assert dx[0, 0, 0] == pytest.approx(1.0)


def test_conv_backward_matches_finite_differences():
    """Analytic gradients agree with central differences on a small instance."""
    rng = np.random.default_rng(9)
    for stride in (1, 2):
        spec = ConvSpec(c_in=2, c_out=3, kernel=3, stride=stride)
        x, weights = _instance(rng, spec, 5, 5, np.float64)
        h_out, w_out = spec.output_dims(5, 5)
        g = rng.standard_normal((3, h_out, w_out))

        def objective(xv, wv):
            return float((dense_conv(xv, wv, spec) * g).sum())

        dw, dx = conv_backward(x, weights, spec, g)
        step = 1e-3
        numeric_w = np.zeros_like(weights)
        for idx in np.ndindex(weights.shape):
            plus, minus = weights.copy(), weights.copy()
            plus[idx] += step
            minus[idx] -= step
            numeric_w[idx] = (objective(x, plus) - objective(x, minus)) / (2 * step)
        numeric_x = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            plus, minus = x.copy(), x.copy()
            plus[idx] += step
            minus[idx] -= step
            numeric_x[idx] = (objective(plus, weights) - objective(minus, weights)) / (2 * step)
        assert np.max(np.abs(dw - numeric_w)) <= 1e-3 * np.abs(numeric_w).max()
        assert np.max(np.abs(dx - numeric_x)) <= 1e-3 * np.abs(numeric_x).max()


def test_conv_backward_rejects_bad_grad():
    """The output gradient must match the output dims."""
    spec = ConvSpec(c_in=1, c_out=2, kernel=3)
    with pytest.raises(InvalidInputError):
        conv_backward(np.zeros((1, 4, 4)), np.zeros((2, 9)), spec, np.zeros((2, 3, 3)))


def test_random_mask_exact_count():
    """Random masks set exactly round(density * cells) cells."""
    rng = np.random.default_rng(10)
    assert random_mask((10, 10), 0.25, rng).sum() == 25
    assert random_mask((10, 10), 0.0, rng).sum() == 0
    assert random_mask((10, 10), 1.0, rng).all()


def test_tensor_binary_format(tmp_path):
    """Tensors carry their dims as int32 then float32 values."""
    x = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    raw = tensor_to_bytes(x)
    assert np.frombuffer(raw[:12], dtype="<i4").tolist() == [2, 3, 4]
    assert len(raw) == 12 + 24 * 4
    assert np.array_equal(tensor_from_bytes(raw), x)
    weights = np.ones((5, 18), dtype=np.float32)
    assert np.array_equal(load_tensor(save_tensor(tmp_path / "w.bin", weights), ndim=2), weights)


def test_time_conv_row():
    """A timing row carries exact FLOPs and the documented columns."""
    spec = ConvSpec(c_in=2, c_out=4, kernel=3)
    timing = time_conv(spec, (16, 16), 0.25, seed=1, repeats=1)
    assert timing.dense_flops == 16 * 16 * 18 * 4
    assert timing.masked_flops == 64 * 18 * 4
    assert timing.density == 0.25
    assert list(timing.to_row()) == TIMING_HEADER
    assert timing.dense_ms >= 0.0 and timing.masked_ms >= 0.0


@pytest.mark.slow
def test_sparse_mask_is_faster():
    """At 5% density on a 128x128 output the masked path beats the dense path."""
    spec = ConvSpec(c_in=16, c_out=32, kernel=3)
    timing = time_conv(spec, (128, 128), 0.05, seed=2, repeats=3)
    logger.info(f"dense {timing.dense_ms:.2f} ms, masked {timing.masked_ms:.2f} ms")
    assert timing.masked_ms < timing.dense_ms
