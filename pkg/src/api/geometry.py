"""
Scale-consistent face boxes derived from 5-point facial landmarks.

Manual face boxes are subjective; boxes derived from landmarks through a
similarity transform to a mean shape are consistent in scale across a
dataset. Landmark order is left eye, right eye, nose, left mouth corner,
right mouth corner.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from scipy.linalg import lstsq

from src.core.utils import InvalidInputError, SingularFitError

# Configure logging
logger = logging.getLogger(__name__)

NUM_LANDMARKS = 5

# Canonical landmark positions inside a unit face box, used to build the
# default mean shape.
TEMPLATE_POINTS = (
    (0.31, 0.36),
    (0.69, 0.36),
    (0.50, 0.56),
    (0.35, 0.76),
    (0.65, 0.76),
)

_DEGENERATE_EPS = 1e-12


def _as_points(points: Sequence[Sequence[float]], name: str) -> np.ndarray:
    arr = np.array(points, dtype=np.float64)
    if arr.shape != (NUM_LANDMARKS, 2):
        raise InvalidInputError(f"{name} needs exactly {NUM_LANDMARKS} (x, y) points, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} coordinates must be finite")
    arr.setflags(write=False)
    return arr


def _is_coincident(pts: np.ndarray) -> bool:
    spread = np.sum((pts - pts.mean(axis=0)) ** 2)
    return bool(spread <= _DEGENERATE_EPS * max(1.0, float(np.sum(pts**2))))


@dataclass(frozen=True)
class LandmarkSet:
    """Five ordered (x, y) landmarks in image pixels."""

    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _as_points(self.points, "LandmarkSet"))

    def to_list(self) -> List[List[float]]:
        return self.points.tolist()


@dataclass(frozen=True)
class NormalizedLandmarks:
    """Five ordered (p, q) landmarks relative to a manual box."""

    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _as_points(self.points, "NormalizedLandmarks"))


@dataclass(frozen=True)
class MeanShape:
    """Five ordered (mp, mq) landmarks averaged over a dataset."""

    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _as_points(self.points, "MeanShape"))

    @property
    def is_well_posed(self) -> bool:
        """True when the points are not all collinear."""
        centered = self.points - self.points.mean(axis=0)
        singular = np.linalg.svd(centered, compute_uv=False)
        return bool(singular[1] > _DEGENERATE_EPS * max(1.0, singular[0]))

    def to_list(self) -> List[List[float]]:
        return self.points.tolist()


@dataclass(frozen=True)
class SimilarityTransform:
    """4-DOF similarity: uniform scale, rotation (radians) and translation."""

    scale: float
    rotation: float
    tx: float
    ty: float

    def __post_init__(self):
        if not self.scale > 0 or not math.isfinite(self.scale):
            raise InvalidInputError(f"Similarity scale must be positive, got {self.scale}")

    @property
    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix acting on column vectors (x, y, 1)."""
        a = self.scale * math.cos(self.rotation)
        b = self.scale * math.sin(self.rotation)
        return np.array([[a, -b, self.tx], [b, a, self.ty], [0.0, 0.0, 1.0]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        m = self.matrix
        return pts @ m[:2, :2].T + m[:2, 2]

    def inverse(self) -> "SimilarityTransform":
        inv = np.linalg.inv(self.matrix)
        return SimilarityTransform(
            scale=1.0 / self.scale,
            rotation=-self.rotation,
            tx=float(inv[0, 2]),
            ty=float(inv[1, 2]),
        )


class SimilarityFit(NamedTuple):
    transform: SimilarityTransform
    residual: float


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box given by its top-left and bottom-right corners."""

    x_tl: float
    y_tl: float
    x_dr: float
    y_dr: float

    def __post_init__(self):
        coords = (self.x_tl, self.y_tl, self.x_dr, self.y_dr)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidInputError(f"BBox coordinates must be finite, got {coords}")
        if not (self.x_dr > self.x_tl and self.y_dr > self.y_tl):
            raise InvalidInputError(f"Degenerate BBox {coords}")

    @classmethod
    def from_center(cls, cx: float, cy: float, side: float) -> "BBox":
        half = side / 2.0
        return cls(cx - half, cy - half, cx + half, cy + half)

    @property
    def width(self) -> float:
        return self.x_dr - self.x_tl

    @property
    def height(self) -> float:
        return self.y_dr - self.y_tl

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x_tl + self.x_dr) / 2.0, (self.y_tl + self.y_dr) / 2.0

    @property
    def area(self) -> float:
        return self.width * self.height

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_tl + dx, self.y_tl + dy, self.x_dr + dx, self.y_dr + dy)

    def intersection(self, other: "BBox") -> float:
        w = min(self.x_dr, other.x_dr) - max(self.x_tl, other.x_tl)
        h = min(self.y_dr, other.y_dr) - max(self.y_tl, other.y_tl)
        return max(w, 0.0) * max(h, 0.0)

    def iou(self, other: "BBox") -> float:
        inter = self.intersection(other)
        return inter / (self.area + other.area - inter)

    def to_list(self) -> List[float]:
        return [self.x_tl, self.y_tl, self.x_dr, self.y_dr]


def normalize_landmarks(landmarks: LandmarkSet, manual_box: BBox) -> NormalizedLandmarks:
    """
    Express landmarks relative to a manually labelled box.

    Args:
        landmarks: Landmarks in image pixels
        manual_box: The manual face box

    Returns:
        Points (x - X_1) / w, (y - Y_1) / h

    Raises:
        InvalidInputError: If the box has non-positive width or height
    """
    w, h = manual_box.width, manual_box.height
    if w <= 0 or h <= 0:
        raise InvalidInputError(f"Manual box must have positive size, got {w}x{h}")
    origin = np.array([manual_box.x_tl, manual_box.y_tl])
    return NormalizedLandmarks((landmarks.points - origin) / np.array([w, h]))


def compute_mean_shape(samples: Sequence[NormalizedLandmarks]) -> MeanShape:
    """
    Average normalized landmarks point by point.

    Raises:
        InvalidInputError: If samples is empty
    """
    if not samples:
        raise InvalidInputError("Cannot compute a mean shape from zero samples")
    stacked = np.stack([s.points for s in samples])
    return MeanShape(stacked.mean(axis=0))


def synthetic_mean_shape(seed: int = 0, samples: int = 64, jitter: float = 0.02) -> MeanShape:
    """
    Default mean shape: the mean of seeded, jittered template faces.

    Each sample places the template inside a random manual box with small
    landmark noise, then normalizes it against that box.
    """
    rng = np.random.default_rng(seed)
    template = np.array(TEMPLATE_POINTS)
    normalized = []
    for _ in range(samples):
        side = rng.uniform(40.0, 200.0)
        origin = rng.uniform(0.0, 500.0, size=2)
        box = BBox(origin[0], origin[1], origin[0] + side, origin[1] + side)
        pts = origin + side * (template + rng.normal(0.0, jitter, size=template.shape))
        normalized.append(normalize_landmarks(LandmarkSet(pts), box))
    return compute_mean_shape(normalized)


def fit_similarity(landmarks: LandmarkSet, mean_shape: MeanShape) -> SimilarityFit:
    """
    Least-squares similarity taking image landmarks onto the mean shape.

    Solves for (a, b, tx, ty) with a = s cos(theta), b = s sin(theta) in
    x' = a x - b y + tx, y' = b x + a y + ty. The parameterization excludes
    reflections.

    Args:
        landmarks: Landmarks in image pixels
        mean_shape: Target mean shape

    Returns:
        SimilarityFit with the transform and the sum of squared residuals

    Raises:
        SingularFitError: If the landmarks are all coincident
    """
    src = landmarks.points
    dst = mean_shape.points

    if _is_coincident(src):
        raise SingularFitError("Landmarks are coincident; similarity fit is undetermined")
    if _is_coincident(dst):
        raise SingularFitError("Mean shape points are coincident")

    n = src.shape[0]
    ones = np.ones(n)
    zeros = np.zeros(n)
    design = np.vstack(
        [
            np.column_stack([src[:, 0], -src[:, 1], ones, zeros]),
            np.column_stack([src[:, 1], src[:, 0], zeros, ones]),
        ]
    )
    rhs = np.concatenate([dst[:, 0], dst[:, 1]])
    (a, b, tx, ty), _, rank, _ = lstsq(design, rhs)
    if rank < 4:
        raise SingularFitError("Similarity fit is rank deficient")

    scale = math.hypot(a, b)
    if scale <= _DEGENERATE_EPS:
        raise SingularFitError("Similarity fit collapsed to zero scale")
    transform = SimilarityTransform(scale=scale, rotation=math.atan2(b, a), tx=float(tx), ty=float(ty))
    residual = float(np.sum((transform.apply(src) - dst) ** 2))
    logger.debug(f"Similarity fit scale={scale:.6g} rotation={transform.rotation:.6g} residual={residual:.3g}")
    return SimilarityFit(transform, residual)


def bbox_from_landmarks(landmarks: LandmarkSet, mean_shape: MeanShape) -> BBox:
    """
    Map the unit square corners (0, 0) and (1, 1) back to the image.

    The two mapped points are ordered by min/max into an axis-aligned box.

    Raises:
        SingularFitError: If the fit fails or the mapped corners collapse
            onto a line (a rotation near 45 degrees)
    """
    fit = fit_similarity(landmarks, mean_shape)
    corners = fit.transform.inverse().apply(np.array([[0.0, 0.0], [1.0, 1.0]]))
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    extent = hi - lo
    if np.any(extent <= _DEGENERATE_EPS * max(1.0, float(np.abs(corners).max()))):
        raise SingularFitError("Mapped unit-square corners do not span a box", {"corners": corners.tolist()})
    return BBox(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def face_size(bbox: BBox) -> float:
    """Geometric mean of box width and height."""
    return math.sqrt(bbox.width * bbox.height)


def landmarks_for_box(box: BBox, mean_shape: MeanShape) -> LandmarkSet:
    """
    Place the mean shape inside a box.

    For a square box, bbox_from_landmarks on the result returns the box again.
    """
    origin = np.array([box.x_tl, box.y_tl])
    return LandmarkSet(origin + mean_shape.points * np.array([box.width, box.height]))
