"""
Synthetic face scenes for the benchmark harness.

A scene is a set of square faces placed without overlap in an H x W image.
Each face's landmarks come from mapping the mean shape into its box, and the
face box is derived back from those landmarks, so geometry round-trips.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np

from src.api.geometry import BBox, LandmarkSet, MeanShape, bbox_from_landmarks, face_size, landmarks_for_box
from src.api.labels import attention_center
from src.api.scalemap import DEFAULT_SCALEMAP, size_to_bin
from src.core.config import SceneConfig, ScaleMapConfig
from src.core.utils import GenerationError, InvalidInputError, ordered_map

logger = logging.getLogger(__name__)

# Scale bins of two distinct faces must be equal or further apart than this.
BIN_SEPARATION = 4

# Background noise amplitude of rendered images.
_BACKGROUND_NOISE = 0.05


@dataclass(frozen=True)
class Face:
    bbox: BBox
    landmarks: LandmarkSet

    def to_dict(self) -> Dict[str, Any]:
        return {"bbox": self.bbox.to_list(), "landmarks": self.landmarks.to_list()}

    @classmethod
    def from_dict(cls, obj: Dict[str, Any]) -> "Face":
        return cls(BBox(*[float(v) for v in obj["bbox"]]), LandmarkSet(obj["landmarks"]))


@dataclass
class Scene:
    dims: Tuple[int, int]
    faces: List[Face] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.dims = (int(self.dims[0]), int(self.dims[1]))
        if min(self.dims) < 1:
            raise InvalidInputError(f"Scene dims must be positive, got {self.dims}")

    @property
    def l_max(self) -> int:
        return max(self.dims)

    @property
    def boxes(self) -> List[BBox]:
        return [face.bbox for face in self.faces]

    def gt_bins(self, cfg: ScaleMapConfig = DEFAULT_SCALEMAP) -> List[int]:
        return [size_to_bin(face_size(f.bbox), self.l_max, cfg).b for f in self.faces]

    def to_dict(self) -> Dict[str, Any]:
        return {"dims": list(self.dims), "faces": [f.to_dict() for f in self.faces], "seed": self.seed}

    @classmethod
    def from_dict(cls, obj: Dict[str, Any]) -> "Scene":
        try:
            return cls(tuple(obj["dims"]), [Face.from_dict(f) for f in obj["faces"]], int(obj.get("seed", 0)))
        except (KeyError, TypeError) as e:
            raise InvalidInputError(f"Malformed scene: {e}") from e


def dump_scenes(scenes: Sequence[Scene]) -> str:
    return json.dumps([s.to_dict() for s in scenes], sort_keys=True, indent=2)


def load_scenes(path: Union[str, Path]) -> List[Scene]:
    """Read a JSON array of scenes (a single scene object is accepted too)."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidInputError(f"Cannot read scenes from {path}: {e}") from e
    if isinstance(obj, dict):
        obj = [obj]
    return [Scene.from_dict(item) for item in obj]


def _check_sizes(cfg: SceneConfig, scalemap: ScaleMapConfig) -> None:
    l_max = max(cfg.dims)
    lo, hi = cfg.size_range
    canonical_lo = lo * scalemap.s_max / l_max
    canonical_hi = hi * scalemap.s_max / l_max
    if canonical_lo < 2.0**scalemap.base_exponent or canonical_hi > 2.0**scalemap.top_exponent:
        raise InvalidInputError(
            f"Face sizes {cfg.size_range} fall outside the bin range at long side {l_max}",
            {"canonical_range": [canonical_lo, canonical_hi]},
        )
    if hi > min(cfg.dims):
        raise InvalidInputError(f"Faces up to {hi} px do not fit a {cfg.dims} image")


def _compatible(
    face: Face, b: int, cell: Tuple[int, int], placed: List[Tuple[Face, int, Tuple[int, int]]], separate_bins: bool
) -> bool:
    for other, other_b, other_cell in placed:
        if face.bbox.intersection(other.bbox) > 0.0:
            return False
        if max(abs(cell[0] - other_cell[0]), abs(cell[1] - other_cell[1])) <= 1:
            return False
        if separate_bins and b != other_b and abs(b - other_b) <= BIN_SEPARATION:
            return False
    return True


def scene_seed_for(seed: int, index: int) -> int:
    """Seed of scene index in a run seeded with seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _generate_one(
    index: int,
    cfg: SceneConfig,
    seed: int,
    mean_shape: MeanShape,
    scalemap: ScaleMapConfig,
    n_s: int,
) -> Scene:
    scene_seed = scene_seed_for(seed, index)
    rng = np.random.default_rng(scene_seed)
    h, w = cfg.dims
    count = int(rng.integers(cfg.faces_per_scene[0], cfg.faces_per_scene[1] + 1))
    placed: List[Tuple[Face, int, Tuple[int, int]]] = []
    attempts = 0
    while len(placed) < count:
        if attempts >= cfg.max_retries:
            raise GenerationError(
                f"Could not place {count} faces in scene {index} after {attempts} attempts",
                {"scene": index, "placed": len(placed)},
            )
        attempts += 1
        size = float(rng.uniform(*cfg.size_range))
        x_tl = float(rng.uniform(0.0, w - size))
        y_tl = float(rng.uniform(0.0, h - size))
        landmarks = landmarks_for_box(BBox(x_tl, y_tl, x_tl + size, y_tl + size), mean_shape)
        face = Face(bbox_from_landmarks(landmarks, mean_shape), landmarks)
        center = attention_center(face.bbox, n_s, cfg.dims, scalemap)
        if _compatible(face, center.b, (center.u, center.v), placed, cfg.bin_separation):
            placed.append((face, center.b, (center.u, center.v)))
    return Scene(cfg.dims, [p[0] for p in placed], scene_seed)


def gen_scenes(
    cfg: SceneConfig,
    seed: int,
    mean_shape: MeanShape,
    scalemap: ScaleMapConfig = DEFAULT_SCALEMAP,
    n_s: int = 8,
    workers: int = 1,
) -> List[Scene]:
    """
    Generate cfg.count synthetic scenes.

    Scene i draws from its own generator seeded with scene_seed_for(seed, i),
    so the output depends only on the seed and the configuration. Faces of one scene do not
    overlap, sit in distinct non-adjacent attention cells and, with
    bin_separation, have scale bins that are equal or more than 4 apart.

    Raises:
        InvalidInputError: If the size range leaves the bin range or the image
        GenerationError: If a scene cannot be packed within max_retries draws
    """
    if cfg.count == 0:
        return []
    _check_sizes(cfg, scalemap)
    scenes = ordered_map(
        lambda i: _generate_one(i, cfg, seed, mean_shape, scalemap, n_s), list(range(cfg.count)), workers
    )
    logger.info(f"Generated {len(scenes)} scenes with {sum(len(s.faces) for s in scenes)} faces")
    return scenes


def render_image(scene: Scene, scalemap: ScaleMapConfig = DEFAULT_SCALEMAP) -> np.ndarray:
    """
    Render a 3 x H x W float32 image of the scene.

    Channel 0 holds a Gaussian blob per face (sigma a quarter of its size),
    channel 1 the same blobs weighted by the face's normalized log size,
    channel 2 nothing but the low background noise all channels carry.
    """
    h, w = scene.dims
    rng = np.random.default_rng(scene.seed)
    image = rng.normal(0.0, _BACKGROUND_NOISE, size=(3, h, w))
    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    octaves = scalemap.top_exponent - scalemap.base_exponent
    for face in scene.faces:
        cx, cy = face.bbox.center
        size = face_size(face.bbox)
        sigma = size / 4.0
        blob = np.exp(-((ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2) / (2.0 * sigma * sigma))
        log_size = (math.log2(size * scalemap.s_max / scene.l_max) - scalemap.base_exponent) / octaves
        image[0] += blob
        image[1] += blob * log_size
    return image.astype(np.float32)
