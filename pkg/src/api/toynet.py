"""
Minimal fully convolutional attention network producing m-channel logit maps.

The network is trained with the sigmoid cross-entropy of labels.loss by plain
SGD, and its forward pass accepts per-layer output masks so masked inference
can be run through the same layers.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from src.api.labels import AttentionMaps, LogitMaps, loss, loss_grad
from src.api.maskconv import conv_backward, dense_conv, im2col, masked_conv
from src.core.config import NetworkSpec, TrainConfig
from src.core.serialization import pack_record, unpack_record, write_bytes
from src.core.utils import InvalidInputError, TrainingDivergedError

logger = logging.getLogger(__name__)


@dataclass
class Parameters:
    """Per-layer weight matrices and bias vectors."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise InvalidInputError("Parameters need one bias vector per weight matrix")
        for w, b in zip(self.weights, self.biases):
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidInputError("Parameters must be finite")

    def copy(self) -> "Parameters":
        return Parameters([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "Parameters":
        return Parameters([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    def check(self, net: NetworkSpec) -> None:
        if len(self.weights) != len(net.layers):
            raise InvalidInputError(f"Network has {len(net.layers)} layers, parameters have {len(self.weights)}")
        for i, (layer, w, b) in enumerate(zip(net.layers, self.weights, self.biases)):
            conv = layer.conv
            if w.shape != (conv.c_out, conv.columns) or b.shape != (conv.c_out,):
                raise InvalidInputError(f"Layer {i} parameters {w.shape}/{b.shape} do not match its spec")

    def to_bytes(self) -> bytes:
        parts = [pack_record([len(self.weights)], np.zeros(0, dtype=np.float32))]
        for w, b in zip(self.weights, self.biases):
            parts.append(pack_record(list(w.shape), w))
            parts.append(pack_record(list(b.shape), b))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Parameters":
        header, _, offset = unpack_record(buf, header_len=1, dim_count=0)
        weights, biases = [], []
        for _ in range(header[0]):
            _, w, offset = unpack_record(buf, header_len=2, offset=offset)
            _, b, offset = unpack_record(buf, header_len=1, offset=offset)
            weights.append(w)
            biases.append(b)
        return cls(weights, biases)

    def save(self, path: Union[str, Path]) -> Path:
        return write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Parameters":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class TrainResult:
    params: Parameters
    losses: List[float] = field(default_factory=list)


def init_parameters(net: NetworkSpec, seed: int = 0) -> Parameters:
    """Seeded fan-in uniform weights in [-s, s], s = sqrt(1 / (c_in * K^2)); zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for layer in net.layers:
        conv = layer.conv
        bound = np.sqrt(1.0 / conv.columns)
        weights.append(rng.uniform(-bound, bound, size=(conv.c_out, conv.columns)).astype(np.float32))
        biases.append(np.zeros(conv.c_out, dtype=np.float32))
    return Parameters(weights, biases)


def layer_output_dims(net: NetworkSpec, image_dims: Tuple[int, int]) -> List[Tuple[int, int]]:
    dims = []
    h, w = image_dims
    for layer in net.layers:
        h, w = layer.conv.output_dims(h, w)
        if h < 1 or w < 1:
            raise InvalidInputError(f"Image {image_dims} is too small for the network")
        dims.append((h, w))
    return dims


def _check_image(net: NetworkSpec, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != net.layers[0].conv.c_in:
        raise InvalidInputError(
            f"Image must be {net.layers[0].conv.c_in} x H x W, got shape {image.shape}"
        )
    return image


def forward(
    net: NetworkSpec,
    params: Parameters,
    image: np.ndarray,
    masks: Optional[Sequence[np.ndarray]] = None,
    workers: int = 1,
) -> LogitMaps:
    """
    Run the network, optionally restricted to per-layer output masks.

    With masks, each layer computes only its active positions (bias included)
    and leaves the others at 0.

    Raises:
        InvalidInputError: On any shape mismatch
    """
    params.check(net)
    x = _check_image(net, image)
    if masks is not None and len(masks) != len(net.layers):
        raise InvalidInputError(f"Expected {len(net.layers)} layer masks, got {len(masks)}")

    for i, (layer, w, b) in enumerate(zip(net.layers, params.weights, params.biases)):
        if masks is None:
            out = dense_conv(x, w, layer.conv, workers)
            out = out + b[:, None, None].astype(out.dtype)
        else:
            mask = np.asarray(masks[i], dtype=bool)
            out = masked_conv(x, w, layer.conv, mask, workers)
            out = np.where(mask[None], out + b[:, None, None].astype(out.dtype), out.dtype.type(0))
        if layer.activation == "relu":
            out = np.maximum(out, 0)
        x = out
    return LogitMaps(x)


def _forward_trace(net: NetworkSpec, params: Parameters, image: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
    """Layer inputs and final logits, using one matrix product per layer."""
    inputs = []
    x = image
    for layer, w, b in zip(net.layers, params.weights, params.biases):
        inputs.append(x)
        h_out, w_out = layer.conv.output_dims(x.shape[1], x.shape[2])
        out = (im2col(x, layer.conv) @ w.T + b).T.reshape(layer.conv.c_out, h_out, w_out)
        if layer.activation == "relu":
            out = np.maximum(out, 0)
        x = out
    return inputs, x


def backward(
    net: NetworkSpec, params: Parameters, image: np.ndarray, gt: AttentionMaps
) -> Tuple[float, Parameters]:
    """
    Loss and parameter gradients for one sample.

    Returns:
        Tuple of (loss, gradients laid out like Parameters)

    Raises:
        InvalidInputError: On any shape mismatch
    """
    params.check(net)
    image = _check_image(net, image)
    inputs, logits_data = _forward_trace(net, params, image)
    logits = LogitMaps(logits_data)
    value = loss(logits, gt)
    grad = loss_grad(logits, gt)

    weight_grads: List[np.ndarray] = [np.empty(0)] * len(net.layers)
    bias_grads: List[np.ndarray] = [np.empty(0)] * len(net.layers)
    activations = inputs[1:] + [logits_data]
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        if layer.activation == "relu":
            grad = grad * (activations[i] > 0)
        bias_grads[i] = grad.sum(axis=(1, 2))
        weight_grads[i], grad = conv_backward(inputs[i], params.weights[i], layer.conv, grad)
    return value, Parameters(weight_grads, bias_grads)


def mask_downsample(mask: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool a binary grid by factor, covering a ragged last row/column (ceil)."""
    if factor < 1:
        raise InvalidInputError(f"Downsample factor must be at least 1, got {factor}")
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    h_out, w_out = -(-h // factor), -(-w // factor)
    padded = np.zeros((h_out * factor, w_out * factor), dtype=bool)
    padded[:h, :w] = mask
    return padded.reshape(h_out, factor, w_out, factor).any(axis=(1, 3))


def resample_mask(grid: np.ndarray, grid_stride: int, out_stride: int, out_dims: Tuple[int, int]) -> np.ndarray:
    """
    Re-grid a binary mask to another stride.

    An output cell is active iff any grid cell overlapping its pixel span is
    active; cells past the grid are inactive.
    """
    grid = np.asarray(grid, dtype=bool)
    prefix = np.zeros((grid.shape[0] + 1, grid.shape[1] + 1), dtype=np.int64)
    prefix[1:, 1:] = grid.cumsum(axis=0).cumsum(axis=1)

    def _span(count: int, limit: int) -> Tuple[np.ndarray, np.ndarray]:
        idx = np.arange(count)
        lo = np.minimum(idx * out_stride // grid_stride, limit)
        hi = np.minimum(((idx + 1) * out_stride - 1) // grid_stride + 1, limit)
        return lo, hi

    y_lo, y_hi = _span(out_dims[0], grid.shape[0])
    x_lo, x_hi = _span(out_dims[1], grid.shape[1])
    total = (
        prefix[y_hi[:, None], x_hi[None, :]]
        - prefix[y_lo[:, None], x_hi[None, :]]
        - prefix[y_hi[:, None], x_lo[None, :]]
        + prefix[y_lo[:, None], x_lo[None, :]]
    )
    return total > 0


def derive_layer_masks(
    convs: Sequence, image_dims: Tuple[int, int], grid: np.ndarray, grid_stride: int
) -> List[np.ndarray]:
    """
    Per-layer output masks from one detector-stride mask.

    Args:
        convs: ConvSpec of each layer, in order
        image_dims: (H, W) of the network input
        grid: Binary mask with one cell per grid_stride x grid_stride pixels
        grid_stride: Pixel stride of grid

    Returns:
        One H_out x W_out mask per layer
    """
    masks = []
    h, w = image_dims
    stride = 1
    for conv in convs:
        h, w = conv.output_dims(h, w)
        stride *= conv.stride
        if stride >= grid_stride and stride % grid_stride == 0:
            pooled = mask_downsample(grid, stride // grid_stride)
            mask = np.zeros((h, w), dtype=bool)
            rows, cols = min(h, pooled.shape[0]), min(w, pooled.shape[1])
            mask[:rows, :cols] = pooled[:rows, :cols]
        else:
            mask = resample_mask(grid, grid_stride, stride, (h, w))
        masks.append(mask)
    return masks


def _learning_rate(cfg: TrainConfig, iteration: int) -> float:
    if cfg.decay_steps is None:
        return cfg.learning_rate
    return cfg.learning_rate * cfg.decay_rate ** (iteration // cfg.decay_steps)


def train(
    net: NetworkSpec,
    params: Parameters,
    dataset: Sequence[Tuple[np.ndarray, AttentionMaps]],
    cfg: TrainConfig,
) -> TrainResult:
    """
    Plain SGD on the mean sigmoid cross-entropy.

    Each iteration draws a seeded minibatch (the whole dataset when
    batch_size covers it), averages the sample gradients and takes one step.

    Returns:
        TrainResult with the updated parameters and the per-iteration loss
        measured before each step

    Raises:
        InvalidInputError: On an empty dataset or mismatched sample dims
        TrainingDivergedError: If the loss becomes non-finite
    """
    params.check(net)
    result = TrainResult(params.copy())
    if cfg.iterations == 0:
        return result
    if not dataset:
        raise InvalidInputError("Cannot train on an empty dataset")
    dims = {np.asarray(image).shape for image, _ in dataset}
    if len(dims) != 1:
        raise InvalidInputError(f"All training images must share dims, got {sorted(dims)}")

    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    iterations = range(cfg.iterations)
    if cfg.progress:
        iterations = tqdm(iterations, desc="train", unit="it")

    current = result.params
    for it in iterations:
        batch = np.arange(n) if cfg.batch_size >= n else np.sort(rng.choice(n, size=cfg.batch_size, replace=False))
        total = 0.0
        grads: Optional[Parameters] = None
        for idx in batch:
            image, gt = dataset[int(idx)]
            value, g = backward(net, current, image, gt)
            total += value
            if grads is None:
                grads = g
            else:
                grads = Parameters(
                    [a + b for a, b in zip(grads.weights, g.weights)],
                    [a + b for a, b in zip(grads.biases, g.biases)],
                )
        mean_loss = total / len(batch)
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(f"Loss became non-finite at iteration {it}", {"iteration": it})
        result.losses.append(mean_loss)

        step = _learning_rate(cfg, it) / len(batch)
        weights = [w - (step * gw).astype(w.dtype) for w, gw in zip(current.weights, grads.weights)]
        biases = [b - (step * gb).astype(b.dtype) for b, gb in zip(current.biases, grads.biases)]
        if not all(np.all(np.isfinite(w)) for w in weights):
            raise TrainingDivergedError(f"Parameters became non-finite at iteration {it}", {"iteration": it})
        current = Parameters(weights, biases)

        if it % 500 == 0:
            logger.debug(f"iteration {it}: loss {mean_loss:.6f}")

    result.params = current
    logger.info(f"Trained {cfg.iterations} iterations: loss {result.losses[0]:.6f} -> {result.losses[-1]:.6f}")
    return result


def predict_attention(
    net: NetworkSpec,
    params: Parameters,
    image: np.ndarray,
    workers: int = 1,
) -> AttentionMaps:
    """Sigmoid of the network logits as attention maps for the image."""
    image = _check_image(net, image)
    logits = forward(net, params, image, workers=workers)
    probs = logits.probabilities()
    return AttentionMaps(probs.astype(np.float32), net.n_s, image.shape[1:])
