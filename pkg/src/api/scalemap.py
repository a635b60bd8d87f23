"""
Face size <-> scale bin mapping and zoom targets.

At the canonical long side s_max, face sizes 2^base_exponent .. 2^top_exponent
split evenly into num_bins logarithmic bins, bins_per_octave per octave.
"""

import logging
import math
from typing import NamedTuple, Tuple

from src.core.config import ScaleMapConfig
from src.core.utils import InvalidInputError

logger = logging.getLogger(__name__)

DEFAULT_SCALEMAP = ScaleMapConfig()

# Raw bin values this close to an integer snap onto it before ceil, so exact
# powers of two and bin_to_size outputs land in their own bin.
_BIN_EPS = 1e-6


class BinAssignment(NamedTuple):
    """A clamped 1-based scale bin and the real-valued bin it came from."""

    b: int
    raw: float


def _require_positive(**values: float) -> None:
    for name, value in values.items():
        if not (value > 0 and math.isfinite(value)):
            raise InvalidInputError(f"{name} must be positive and finite, got {value}")


def raw_bin(x: float, l_max: float, cfg: ScaleMapConfig = DEFAULT_SCALEMAP) -> float:
    """Unclamped, real-valued bin of a face of size x in an image of long side l_max."""
    _require_positive(x=x, l_max=l_max)
    return cfg.bins_per_octave * (math.log2(x * cfg.s_max / l_max) - cfg.base_exponent)


def size_to_bin(x: float, l_max: float, cfg: ScaleMapConfig = DEFAULT_SCALEMAP) -> BinAssignment:
    """
    Map a face size to its scale bin.

    Args:
        x: Face size in pixels
        l_max: Long side of the image in pixels
        cfg: Bin layout

    Returns:
        BinAssignment with b = clamp(ceil(raw), 1, m) and the raw value

    Raises:
        InvalidInputError: If x or l_max is not positive
    """
    raw = raw_bin(x, l_max, cfg)
    b = min(max(math.ceil(raw - _BIN_EPS), 1), cfg.num_bins)
    return BinAssignment(b, raw)


def raw_bin_to_size(raw: float, l_max: float, cfg: ScaleMapConfig = DEFAULT_SCALEMAP) -> float:
    """Continuous inverse of raw_bin."""
    _require_positive(l_max=l_max)
    return (l_max / cfg.s_max) * 2.0 ** (raw / cfg.bins_per_octave + cfg.base_exponent)


def bin_to_size(b: int, l_max: float, cfg: ScaleMapConfig = DEFAULT_SCALEMAP) -> float:
    """
    Largest face size belonging to bin b.

    Raises:
        InvalidInputError: If b is outside [1, m] or l_max is not positive
    """
    if int(b) != b or not 1 <= b <= cfg.num_bins:
        raise InvalidInputError(f"Scale bin must be an integer in [1, {cfg.num_bins}], got {b}")
    return raw_bin_to_size(float(b), l_max, cfg)


def zoom_target_length(x: float, l_max: float, cfg: ScaleMapConfig = DEFAULT_SCALEMAP) -> float:
    """
    Long side to resize the image to so a face of size x becomes the anchor size.

    Raises:
        InvalidInputError: If x or l_max is not positive
    """
    _require_positive(x=x, l_max=l_max)
    return 2.0**cfg.anchor_log2 / x * l_max


def anchor_size(cfg: ScaleMapConfig = DEFAULT_SCALEMAP) -> float:
    return 2.0**cfg.anchor_log2


def detection_range(cfg: ScaleMapConfig = DEFAULT_SCALEMAP) -> Tuple[float, float]:
    """Face sizes whose overlap with the single anchor is at least 0.5."""
    return 2.0 ** (cfg.anchor_log2 - 0.5), 2.0 ** (cfg.anchor_log2 + 0.5)


def anchor_overlap(x: float, cfg: ScaleMapConfig = DEFAULT_SCALEMAP) -> float:
    """IoU of a square face of side x and the anchor square sharing its center."""
    _require_positive(x=x)
    a = anchor_size(cfg)
    return min(x, a) ** 2 / max(x, a) ** 2


def zoomed_size(x: float, estimated_size: float, l_max: float, cfg: ScaleMapConfig = DEFAULT_SCALEMAP) -> float:
    """Size a face of true size x has after zooming the image for a face estimated at estimated_size."""
    return x * zoom_target_length(estimated_size, l_max, cfg) / l_max
