"""
Scale-spatial computation unit: decode attention maps into scale proposals,
face regions, detector masks and a pyramid plan.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from src.api.geometry import BBox
from src.api.labels import AttentionMaps
from src.api.scalemap import DEFAULT_SCALEMAP, bin_to_size, zoom_target_length
from src.core.config import DecodeParams, ScaleMapConfig
from src.core.serialization import run_length_decode, run_length_encode, write_bytes
from src.core.utils import InvalidInputError, ordered_map

logger = logging.getLogger(__name__)

# 8-connectivity
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ScaleProposal:
    b: int
    score: float

    def to_dict(self) -> Dict[str, Any]:
        return {"b": self.b, "score": self.score}


@dataclass(frozen=True)
class RegionProposal:
    """A face region in original-image pixels, decoded for scale bin b."""

    center: Tuple[float, float]
    side: float
    b: int
    score: float
    cell: Tuple[int, int]

    @property
    def box(self) -> BBox:
        return BBox.from_center(self.center[0], self.center[1], self.side)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "center": list(self.center),
            "side": self.side,
            "b": self.b,
            "score": self.score,
            "cell": list(self.cell),
        }


@dataclass
class SpatialMask:
    """Binary detector mask at stride n_d over a resized image."""

    grid: np.ndarray
    n_d: int
    target_dims: Tuple[int, int]

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        expected = mask_dims(self.target_dims, self.n_d)
        if self.grid.shape != expected:
            raise InvalidInputError(f"Mask shape {self.grid.shape} does not match {expected}")

    @property
    def density(self) -> float:
        return float(self.grid.mean()) if self.grid.size else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_d": self.n_d,
            "target_dims": list(self.target_dims),
            "shape": list(self.grid.shape),
            "rle": run_length_encode(self.grid),
        }

    @classmethod
    def from_dict(cls, obj: Dict[str, Any]) -> "SpatialMask":
        shape = tuple(obj["shape"])
        return cls(run_length_decode(obj["rle"], shape), int(obj["n_d"]), tuple(obj["target_dims"]))

    def to_pgm(self) -> bytes:
        """Binary PGM (P5) image of the mask, 255 for active cells."""
        h, w = self.grid.shape
        header = f"P5\n{w} {h}\n255\n".encode("ascii")
        return header + (self.grid.astype(np.uint8) * 255).tobytes()

    def save_pgm(self, path: Union[str, Path]) -> Path:
        return write_bytes(path, self.to_pgm())


@dataclass
class PyramidLevel:
    l_t: float
    mask: SpatialMask
    proposal: ScaleProposal
    regions: List[RegionProposal] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "l_t": self.l_t,
            "proposal": self.proposal.to_dict(),
            "regions": [r.to_dict() for r in self.regions],
            "mask": self.mask.to_dict(),
        }


@dataclass
class PyramidPlan:
    levels: List[PyramidLevel] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {"levels": [level.to_dict() for level in self.levels]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def mask_dims(target_dims: Tuple[int, int], n_d: int) -> Tuple[int, int]:
    h, w = target_dims
    return -(-h // n_d), -(-w // n_d)


def resized_dims(image_dims: Tuple[int, int], long_side: float) -> Tuple[int, int]:
    """Image dims after resizing so the long side becomes long_side."""
    h, w = image_dims
    scale = long_side / max(h, w)
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))


def scale_vector(f: AttentionMaps) -> np.ndarray:
    """Per-channel maximum of the attention maps; index b-1 holds bin b."""
    if f.data[0].size == 0:
        return np.zeros(f.m, dtype=np.float64)
    return f.data.reshape(f.m, -1).max(axis=1).astype(np.float64)


def smooth(s: np.ndarray, window: int) -> np.ndarray:
    """
    Centered moving average, averaging over the in-range part of the window
    at the edges.

    Raises:
        InvalidInputError: If window is not a positive odd number
    """
    if window < 1 or window % 2 == 0:
        raise InvalidInputError(f"Smoothing window must be a positive odd number, got {window}")
    s = np.asarray(s, dtype=np.float64)
    if window == 1:
        return s.copy()
    kernel = np.ones(window)
    lo = window // 2
    sums = np.convolve(s, kernel)[lo : lo + s.size]
    counts = np.convolve(np.ones_like(s), kernel)[lo : lo + s.size]
    return sums / counts


def nms_1d(s: np.ndarray, radius: int, threshold: float) -> List[ScaleProposal]:
    """
    Greedy 1D non-maximum suppression over scale bins.

    Repeatedly takes the highest remaining value >= threshold and suppresses
    every bin within +-radius of it. Ties go to the smaller bin.
    """
    s = np.asarray(s, dtype=np.float64)
    alive = np.ones(s.size, dtype=bool)
    proposals: List[ScaleProposal] = []
    for idx in np.argsort(-s, kind="stable"):
        if s[idx] < threshold:
            break
        if not alive[idx]:
            continue
        proposals.append(ScaleProposal(b=int(idx) + 1, score=float(s[idx])))
        alive[max(idx - radius, 0) : idx + radius + 1] = False
    return proposals


def location_map(f: AttentionMaps, b: int, neighborhood: int = 4) -> np.ndarray:
    """Elementwise maximum of the channels b-neighborhood .. b+neighborhood."""
    if not 1 <= b <= f.m:
        raise InvalidInputError(f"Scale bin must be in [1, {f.m}], got {b}")
    lo = max(b - neighborhood, 1)
    hi = min(b + neighborhood, f.m)
    return f.data[lo - 1 : hi].max(axis=0)


def decode_locations(
    f: AttentionMaps,
    b: int,
    threshold: float,
    cfg: ScaleMapConfig = DEFAULT_SCALEMAP,
    neighborhood: int = 4,
) -> List[RegionProposal]:
    """
    Face regions for scale bin b.

    Cells of the location map exceeding threshold are grouped by
    8-connectivity; each component gives one region at its peak cell (first
    peak in row-major order), with side bin_to_size(b) at the map's l_max.

    Returns:
        Regions ordered by descending score, then row-major cell order
    """
    c_b = location_map(f, b, neighborhood)
    labelled, count = ndimage.label(c_b > threshold, structure=_EIGHT_CONNECTED)
    if count == 0:
        return []

    side = bin_to_size(b, f.l_max, cfg)
    regions = []
    for component in range(1, count + 1):
        values = np.where(labelled == component, c_b, -np.inf)
        v, u = np.unravel_index(int(np.argmax(values)), values.shape)
        center = ((u + 0.5) * f.n_s, (v + 0.5) * f.n_s)
        regions.append(
            RegionProposal(center=center, side=side, b=b, score=float(c_b[v, u]), cell=(int(u), int(v)))
        )
    regions.sort(key=lambda r: (-r.score, r.cell[1], r.cell[0]))
    return regions


def build_mask(
    regions: Sequence[RegionProposal],
    proposal_l_max: float,
    target_l_t: float,
    n_d: int,
    n_s: int,
    image_dims: Tuple[int, int],
) -> SpatialMask:
    """
    Rasterize regions into a detector mask for the image resized to target_l_t.

    Each region is scaled by target_l_t / proposal_l_max, its side enlarged by
    2 * n_s for context, and a cell is set iff its center lies inside (or on
    the edge of) any enlarged region.

    Raises:
        InvalidInputError: If n_d is not positive
    """
    if n_d < 1:
        raise InvalidInputError(f"Detector stride must be positive, got {n_d}")
    target_dims = resized_dims(image_dims, target_l_t)
    h_m, w_m = mask_dims(target_dims, n_d)
    grid = np.zeros((h_m, w_m), dtype=bool)
    if not regions:
        return SpatialMask(grid, n_d, target_dims)

    ratio = target_l_t / proposal_l_max
    ys = (np.arange(h_m) + 0.5) * n_d
    xs = (np.arange(w_m) + 0.5) * n_d
    for region in regions:
        cx, cy = region.center[0] * ratio, region.center[1] * ratio
        half = (region.side * ratio + 2 * n_s) / 2.0
        rows = (ys >= cy - half) & (ys <= cy + half)
        cols = (xs >= cx - half) & (xs <= cx + half)
        grid |= rows[:, None] & cols[None, :]
    return SpatialMask(grid, n_d, target_dims)


def decode_attention(
    f: AttentionMaps,
    params: DecodeParams,
    cfg: ScaleMapConfig = DEFAULT_SCALEMAP,
) -> List[Tuple[ScaleProposal, List[RegionProposal]]]:
    """Scale proposals and, for each, its decoded regions at params.threshold."""
    s_v = smooth(scale_vector(f), params.smooth_window)
    proposals = nms_1d(s_v, params.nms_radius, params.threshold)
    return [
        (proposal, decode_locations(f, proposal.b, params.threshold, cfg, params.neighborhood))
        for proposal in proposals
    ]


def plan_pyramid(
    proposals: Sequence[ScaleProposal],
    f: AttentionMaps,
    l_max: Optional[float] = None,
    cfg: ScaleMapConfig = DEFAULT_SCALEMAP,
    n_d: int = 16,
    threshold: float = 0.5,
    context_stride: Optional[int] = None,
    neighborhood: int = 4,
    workers: int = 1,
) -> PyramidPlan:
    """
    One pyramid level per scale proposal.

    Each level resizes the image so the proposal's face size becomes the
    anchor size, and carries the mask of the regions decoded for that bin.
    Levels whose rounded long sides differ by at most one pixel are merged,
    keeping the higher-scoring proposal and the union of regions.

    Args:
        proposals: Output of nms_1d
        f: Attention maps the proposals were decoded from
        l_max: Long side of the original image (defaults to the maps' image)
        cfg: Bin layout
        n_d: Detector stride
        threshold: Location decode threshold
        context_stride: Context margin stride (defaults to n_d)
        neighborhood: Bin window of the location map
        workers: Threads used to build level masks

    Returns:
        PyramidPlan with levels sorted by descending long side
    """
    l_max = float(l_max if l_max is not None else f.l_max)
    context = n_d if context_stride is None else context_stride

    candidates = []
    for proposal in proposals:
        l_t = zoom_target_length(bin_to_size(proposal.b, l_max, cfg), l_max, cfg)
        regions = decode_locations(f, proposal.b, threshold, cfg, neighborhood)
        candidates.append((l_t, proposal, regions))
    candidates.sort(key=lambda c: (-c[0], -c[1].score))

    merged: List[Tuple[float, ScaleProposal, List[RegionProposal]]] = []
    for l_t, proposal, regions in candidates:
        if merged and abs(round(merged[-1][0]) - round(l_t)) <= 1:
            kept_l_t, kept, kept_regions = merged[-1]
            best = kept if kept.score >= proposal.score else proposal
            merged[-1] = (kept_l_t, best, kept_regions + regions)
        else:
            merged.append((l_t, proposal, list(regions)))

    def _level(item: Tuple[float, ScaleProposal, List[RegionProposal]]) -> PyramidLevel:
        l_t, proposal, regions = item
        mask = build_mask(regions, l_max, l_t, n_d, context, f.image_dims)
        return PyramidLevel(l_t=l_t, mask=mask, proposal=proposal, regions=regions)

    levels = ordered_map(_level, merged, workers)
    logger.debug(f"Planned {len(levels)} pyramid levels from {len(proposals)} scale proposals")
    return PyramidPlan(levels)
