"""
Ground-truth attention maps and their sigmoid cross-entropy supervision.

Each face writes 1 into its scale bin at its attention-center cell, and a
soft (1/2)^|i| into the neighbouring bins b+i, |i| <= 4, at the same cell.
Contributions accumulate over faces and are clipped to 1.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Tuple, Union

import numpy as np
from scipy.special import expit

from src.api.geometry import BBox, face_size
from src.api.scalemap import DEFAULT_SCALEMAP, size_to_bin
from src.core.config import LabelConfig, ScaleMapConfig
from src.core.serialization import pack_record, unpack_record, write_bytes
from src.core.utils import InvalidInputError, OutOfBoundsError

# Configure logging
logger = logging.getLogger(__name__)

DEFAULT_LABELS = LabelConfig()


def feature_dims(image_dims: Tuple[int, int], n_s: int) -> Tuple[int, int]:
    """Feature-map dims for an image at stride n_s (ceil division)."""
    h, w = image_dims
    return -(-h // n_s), -(-w // n_s)


@dataclass
class AttentionMaps:
    """m x H_f x W_f scale/spatial responses in [0, 1]."""

    data: np.ndarray
    n_s: int
    image_dims: Tuple[int, int]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.image_dims = (int(self.image_dims[0]), int(self.image_dims[1]))
        if self.data.ndim != 3:
            raise InvalidInputError(f"AttentionMaps data must be m x H_f x W_f, got shape {self.data.shape}")
        if self.n_s < 1:
            raise InvalidInputError(f"Stride must be at least 1, got {self.n_s}")
        if self.data.shape[1:] != feature_dims(self.image_dims, self.n_s):
            raise InvalidInputError(
                f"Map dims {self.data.shape[1:]} do not match image {self.image_dims} at stride {self.n_s}"
            )
        if self.data.size and not (np.all(self.data >= 0.0) and np.all(self.data <= 1.0)):
            raise InvalidInputError("AttentionMaps values must lie in [0, 1]")

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def l_max(self) -> int:
        return max(self.image_dims)

    def channel(self, b: int) -> np.ndarray:
        """Map of 1-based scale bin b."""
        return self.data[b - 1]

    def to_bytes(self) -> bytes:
        m, h_f, w_f = self.data.shape
        return pack_record([m, h_f, w_f, self.n_s], self.data)

    @classmethod
    def from_bytes(cls, buf: bytes, image_dims: Union[Tuple[int, int], None] = None) -> "AttentionMaps":
        """
        Decode the flat binary form.

        The header stores no image dims; without image_dims they are taken
        as the feature dims times the stride.
        """
        header, data, _ = unpack_record(buf, header_len=4, dim_count=3)
        _, h_f, w_f, n_s = header
        dims = image_dims if image_dims is not None else (h_f * n_s, w_f * n_s)
        return cls(data, n_s, dims)

    def save(self, path: Union[str, Path]) -> Path:
        return write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path], image_dims: Union[Tuple[int, int], None] = None) -> "AttentionMaps":
        return cls.from_bytes(Path(path).read_bytes(), image_dims)

    def to_dict(self) -> Dict[str, Any]:
        return {"n_s": self.n_s, "image_dims": list(self.image_dims), "data": self.data.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "AttentionMaps":
        obj = json.loads(text)
        return cls(np.array(obj["data"], dtype=np.float32), int(obj["n_s"]), tuple(obj["image_dims"]))


@dataclass
class LogitMaps:
    """Pre-sigmoid network outputs, same layout as AttentionMaps."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise InvalidInputError(f"LogitMaps data must be m x H_f x W_f, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidInputError("LogitMaps values must be finite")

    def probabilities(self) -> np.ndarray:
        return expit(self.data.astype(np.float64))


@dataclass(frozen=True)
class AttentionCenter:
    b: int
    u: int
    v: int


def _clip_to_image(bbox: BBox, image_dims: Tuple[int, int]) -> BBox:
    h, w = image_dims
    x_tl, y_tl = max(bbox.x_tl, 0.0), max(bbox.y_tl, 0.0)
    x_dr, y_dr = min(bbox.x_dr, float(w)), min(bbox.y_dr, float(h))
    if x_dr <= x_tl or y_dr <= y_tl:
        raise OutOfBoundsError(f"Box {bbox.to_list()} lies outside the {w}x{h} image")
    return BBox(x_tl, y_tl, x_dr, y_dr)


def attention_center(
    bbox: BBox,
    n_s: int,
    image_dims: Tuple[int, int],
    cfg: ScaleMapConfig = DEFAULT_SCALEMAP,
) -> AttentionCenter:
    """
    Feature-map cell and scale bin a face is written to.

    The cell is the floor of the clipped box center divided by n_s; the bin
    comes from the size of the unclipped box at l_max = the image long side.

    Raises:
        OutOfBoundsError: If the box lies entirely outside the image
    """
    clipped = _clip_to_image(bbox, image_dims)
    h_f, w_f = feature_dims(image_dims, n_s)
    u = min(int(math.floor((clipped.x_tl + clipped.x_dr) / (2.0 * n_s))), w_f - 1)
    v = min(int(math.floor((clipped.y_tl + clipped.y_dr) / (2.0 * n_s))), h_f - 1)
    b = size_to_bin(face_size(bbox), max(image_dims), cfg).b
    return AttentionCenter(b=b, u=u, v=v)


def render_labels(
    boxes: Iterable[BBox],
    image_dims: Tuple[int, int],
    n_s: int,
    cfg: ScaleMapConfig = DEFAULT_SCALEMAP,
    label_cfg: LabelConfig = DEFAULT_LABELS,
) -> AttentionMaps:
    """
    Render ground-truth attention maps for a set of face boxes.

    Args:
        boxes: Face boxes in image pixels
        image_dims: (H, W) of the image
        n_s: Stride of the attention network
        cfg: Bin layout
        label_cfg: Neighbourhood radius and spread base

    Returns:
        AttentionMaps with values in [0, 1]
    """
    h_f, w_f = feature_dims(image_dims, n_s)
    acc = np.zeros((cfg.num_bins, h_f, w_f), dtype=np.float64)
    radius = label_cfg.neighborhood
    count = 0
    for bbox in boxes:
        center = attention_center(bbox, n_s, image_dims, cfg)
        for i in range(-radius, radius + 1):
            b = center.b + i
            if 1 <= b <= cfg.num_bins:
                acc[b - 1, center.v, center.u] += label_cfg.spread_base ** abs(i)
        count += 1
    np.minimum(acc, 1.0, out=acc)
    logger.debug(f"Rendered {count} faces into {cfg.num_bins}x{h_f}x{w_f} maps")
    return AttentionMaps(acc.astype(np.float32), n_s, image_dims)


def _check_shapes(logits: LogitMaps, gt: AttentionMaps) -> None:
    if logits.data.shape != gt.data.shape:
        raise InvalidInputError(f"Logit shape {logits.data.shape} does not match label shape {gt.data.shape}")


def loss(logits: LogitMaps, gt: AttentionMaps) -> float:
    """
    Mean sigmoid cross-entropy over every cell of every channel.

    Uses max(z, 0) - z p + log(1 + exp(-|z|)), which is stable for large |z|.

    Raises:
        InvalidInputError: On shape mismatch
    """
    _check_shapes(logits, gt)
    z = logits.data.astype(np.float64)
    p = gt.data.astype(np.float64)
    if z.size == 0:
        return 0.0
    per_cell = np.maximum(z, 0.0) - z * p + np.log1p(np.exp(-np.abs(z)))
    return float(per_cell.mean())


def loss_grad(logits: LogitMaps, gt: AttentionMaps) -> np.ndarray:
    """
    Gradient of loss with respect to the logits: (sigmoid(z) - p) / N.

    Raises:
        InvalidInputError: On shape mismatch
    """
    _check_shapes(logits, gt)
    z = logits.data.astype(np.float64)
    p = gt.data.astype(np.float64)
    return (expit(z) - p) / max(z.size, 1)
