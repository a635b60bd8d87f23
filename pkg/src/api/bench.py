"""
Benchmark harness: recall-vs-ratio evaluation, threshold selection and the
FLOP cost model comparing a dense image pyramid with the planned masked one.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from src.api.labels import AttentionMaps, feature_dims, render_labels
from src.api.maskconv import ConvTiming, flops, time_conv
from src.api.scalemap import DEFAULT_SCALEMAP
from src.api.scenes import Scene, render_image
from src.api.sscu import (
    PyramidPlan,
    RegionProposal,
    ScaleProposal,
    build_mask,
    decode_attention,
    plan_pyramid,
    resized_dims,
)
from src.api.toynet import Parameters, derive_layer_masks, predict_attention
from src.core.config import BenchConfig, ConvSpec, DecodeParams, LabelConfig, NetworkSpec, ScaleMapConfig
from src.core.utils import InvalidInputError, NotAchievableError, ordered_map

logger = logging.getLogger(__name__)

# Matching criterion between a decoded region and a ground-truth face.
MAX_BIN_ERROR = 4
MIN_IOU = 0.5

EVAL_HEADER = ["threshold", "ratio", "recall", "scale_recall", "location_recall"]
COST_HEADER = ["scene", "kind", "level", "long_side", "height", "width", "density", "flops"]
CURVE_HEADER = ["threshold", "recall", "speedup"]

Decoded = List[Tuple[ScaleProposal, List[RegionProposal]]]


class Predictor(Protocol):
    """Anything producing attention maps for a scene."""

    name: str

    def predict(self, scene: Scene) -> AttentionMaps: ...


@dataclass
class OraclePredictor:
    """Ground-truth label maps fed straight into the decoder."""

    scalemap: ScaleMapConfig = DEFAULT_SCALEMAP
    labels: LabelConfig = field(default_factory=LabelConfig)
    name: str = "oracle"

    def predict(self, scene: Scene) -> AttentionMaps:
        return render_labels(scene.boxes, scene.dims, self.labels.n_s, self.scalemap, self.labels)


@dataclass
class NetworkPredictor:
    """Sigmoid outputs of a trained attention network on the rendered scene."""

    net: NetworkSpec
    params: Parameters
    scalemap: ScaleMapConfig = DEFAULT_SCALEMAP
    name: str = "toynet"

    def predict(self, scene: Scene) -> AttentionMaps:
        return predict_attention(self.net, self.params, render_image(scene, self.scalemap))


@dataclass
class NoisePredictor:
    """Sigmoid of seeded Gaussian logits; a floor for the recall curve."""

    n_s: int = 8
    m: int = 60
    scale: float = 2.0
    name: str = "noise"

    def predict(self, scene: Scene) -> AttentionMaps:
        rng = np.random.default_rng(scene.seed)
        h_f, w_f = feature_dims(scene.dims, self.n_s)
        logits = rng.normal(0.0, self.scale, size=(self.m, h_f, w_f))
        return AttentionMaps(expit(logits).astype(np.float32), self.n_s, scene.dims)


@dataclass(frozen=True)
class EvalPoint:
    threshold: float
    ratio: float
    recall: float
    scale_recall: float
    location_recall: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "threshold": self.threshold,
            "ratio": self.ratio,
            "recall": self.recall,
            "scale_recall": self.scale_recall,
            "location_recall": self.location_recall,
        }

    def to_row(self) -> Dict[str, str]:
        return {k: f"{v:.6f}" for k, v in self.to_dict().items()}


@dataclass(frozen=True)
class CostRow:
    """FLOPs of one pyramid level of one scene."""

    scene: int
    kind: str
    level: int
    long_side: float
    dims: Tuple[int, int]
    density: float
    flops: int

    def to_row(self) -> Dict[str, Any]:
        return {
            "scene": self.scene,
            "kind": self.kind,
            "level": self.level,
            "long_side": f"{self.long_side:.3f}",
            "height": self.dims[0],
            "width": self.dims[1],
            "density": f"{self.density:.6f}",
            "flops": self.flops,
        }


@dataclass
class CostReport:
    mode: str
    rows: List[CostRow] = field(default_factory=list)

    @property
    def baseline(self) -> int:
        return sum(r.flops for r in self.rows if r.kind == "baseline")

    @property
    def planned(self) -> int:
        return sum(r.flops for r in self.rows if r.kind != "baseline")

    @property
    def speedup(self) -> Optional[float]:
        """baseline / planned; None when nothing is planned."""
        planned = self.planned
        return self.baseline / planned if planned else None

    def extend(self, other: "CostReport") -> None:
        self.rows.extend(other.rows)

    def summary(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "baseline_flops": self.baseline,
            "planned_flops": self.planned,
            "speedup": self.speedup,
            "levels": sum(1 for r in self.rows if r.kind == "planned"),
        }


@dataclass
class PipelineResult:
    plan: PyramidPlan
    proposals: Decoded
    cost: CostReport


def make_predictor(
    kind: str,
    scalemap: ScaleMapConfig = DEFAULT_SCALEMAP,
    labels: Optional[LabelConfig] = None,
    net: Optional[NetworkSpec] = None,
    params: Optional[Parameters] = None,
) -> Predictor:
    """
    Build a predictor by name.

    Raises:
        InvalidInputError: For an unknown kind, or toynet without a network
    """
    labels = labels or LabelConfig()
    if kind == "oracle":
        return OraclePredictor(scalemap, labels)
    if kind == "noise":
        return NoisePredictor(n_s=labels.n_s, m=scalemap.num_bins)
    if kind == "toynet":
        if net is None or params is None:
            raise InvalidInputError("The toynet predictor needs a network and its parameters")
        return NetworkPredictor(net, params, scalemap)
    raise InvalidInputError(f"Unknown predictor '{kind}'")


def predict_all(scenes: Sequence[Scene], predictor: Predictor, workers: int = 1) -> List[AttentionMaps]:
    return ordered_map(predictor.predict, list(scenes), workers)


def _match_scene(scene: Scene, decoded: Decoded, scalemap: ScaleMapConfig) -> Tuple[int, int, int, int]:
    """(regions, joint hits, scale hits, location hits) for one scene."""
    gt_boxes = scene.boxes
    gt_bins = scene.gt_bins(scalemap)
    regions = sorted(
        (region for _, regions in decoded for region in regions),
        key=lambda r: (-r.score, r.b, r.cell[1], r.cell[0]),
    )
    proposal_bins = [p.b for p, _ in decoded]

    matched = [False] * len(gt_boxes)
    for region in regions:
        box = region.box
        best, best_iou = -1, MIN_IOU
        for j, (gt_box, gt_b) in enumerate(zip(gt_boxes, gt_bins)):
            if matched[j] or abs(region.b - gt_b) > MAX_BIN_ERROR:
                continue
            iou = box.iou(gt_box)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            matched[best] = True

    scale_hits = sum(1 for gt_b in gt_bins if any(abs(b - gt_b) <= MAX_BIN_ERROR for b in proposal_bins))
    location_hits = sum(1 for gt_box in gt_boxes if any(r.box.iou(gt_box) >= MIN_IOU for r in regions))
    return len(regions), sum(matched), scale_hits, location_hits


def evaluate_threshold(
    scenes: Sequence[Scene],
    maps: Sequence[AttentionMaps],
    params: DecodeParams,
    threshold: float,
    scalemap: ScaleMapConfig = DEFAULT_SCALEMAP,
) -> EvalPoint:
    """Recall and predicted/GT ratio of all scenes decoded at one threshold."""
    decode = params.with_threshold(threshold)
    totals = np.zeros(4, dtype=np.int64)
    gt_total = 0
    for scene, f in zip(scenes, maps):
        totals += _match_scene(scene, decode_attention(f, decode, scalemap), scalemap)
        gt_total += len(scene.faces)
    proposals, joint, scale_hits, location_hits = (int(v) for v in totals)
    if gt_total == 0:
        return EvalPoint(threshold, float(proposals), 1.0, 1.0, 1.0)
    return EvalPoint(
        threshold=threshold,
        ratio=proposals / gt_total,
        recall=joint / gt_total,
        scale_recall=scale_hits / gt_total,
        location_recall=location_hits / gt_total,
    )


def eval_recall_ratio(
    scenes: Sequence[Scene],
    params: DecodeParams,
    predictor: Predictor,
    scalemap: ScaleMapConfig = DEFAULT_SCALEMAP,
    workers: int = 1,
    maps: Optional[Sequence[AttentionMaps]] = None,
) -> List[EvalPoint]:
    """
    Sweep the decode threshold over params.thresholds.

    A ground-truth face is recalled when a decoded region, taken greedily by
    descending score, has a bin within 4 of the face's bin and IoU >= 0.5
    with its box. Each region recalls at most one face.

    Returns:
        One EvalPoint per threshold, in ascending threshold order

    Raises:
        InvalidInputError: If scenes is empty
    """
    if not scenes:
        raise InvalidInputError("eval_recall_ratio needs at least one scene")
    if maps is None:
        maps = predict_all(scenes, predictor, workers)
    thresholds = sorted(params.thresholds)
    points = ordered_map(lambda t: evaluate_threshold(scenes, maps, params, t, scalemap), thresholds, workers)
    logger.info(f"Evaluated {len(points)} thresholds on {len(scenes)} scenes with the {predictor.name} predictor")
    return points


def select_threshold(points: Sequence[EvalPoint], target: float) -> float:
    """
    Largest threshold reaching the target recall.

    Raises:
        NotAchievableError: If no point reaches the target; carries the point
            with the best recall (smallest ratio on ties)
    """
    qualifying = [p.threshold for p in points if p.recall >= target]
    if qualifying:
        return max(qualifying)
    best = min(points, key=lambda p: (-p.recall, p.ratio, -p.threshold)) if points else None
    raise NotAchievableError(f"No threshold reaches recall {target}", best)


def baseline_long_sides(bench: BenchConfig) -> List[float]:
    return [float(round(bench.baseline_long_side * 2.0**-k)) for k in range(bench.baseline_levels)]


def _detector_flops(
    detector: Sequence[ConvSpec], dims: Tuple[int, int], grid: Optional[np.ndarray], n_d: int
) -> Tuple[int, float]:
    """Total FLOPs of the detector on one level, and the mask density of its first layer."""
    masks = derive_layer_masks(detector, dims, grid, n_d) if grid is not None else [None] * len(detector)
    total = 0
    density = 1.0
    h, w = dims
    for i, (conv, mask) in enumerate(zip(detector, masks)):
        h, w = conv.output_dims(h, w)
        if h < 1 or w < 1:
            break
        count = flops(conv, (h, w), mask)
        total += count.dense if mask is None else count.masked
        if i == 0 and mask is not None:
            density = count.density
    return total, density


def scene_cost(
    index: int,
    scene: Scene,
    f: AttentionMaps,
    params: DecodeParams,
    bench: BenchConfig,
    scalemap: ScaleMapConfig = DEFAULT_SCALEMAP,
    network: Optional[NetworkSpec] = None,
) -> Tuple[CostReport, PyramidPlan, Decoded]:
    """
    Cost rows of one scene under bench.cost_mode.

    The baseline is the dense detector over the fixed pyramid. The planned
    side depends on the mode: "scale" runs the detector densely on the
    planned levels, "spatial" runs it masked on the baseline levels, "both"
    runs it masked on the planned levels.
    """
    decoded = decode_attention(f, params, scalemap)
    plan = plan_pyramid(
        [p for p, _ in decoded],
        f,
        scene.l_max,
        scalemap,
        n_d=params.n_d,
        threshold=params.threshold,
        context_stride=params.context_stride,
        neighborhood=params.neighborhood,
    )
    report = CostReport(bench.cost_mode)
    n_d = params.n_d

    for level, long_side in enumerate(baseline_long_sides(bench)):
        dims = resized_dims(scene.dims, long_side)
        total, _ = _detector_flops(bench.detector, dims, None, n_d)
        report.rows.append(CostRow(index, "baseline", level, long_side, dims, 1.0, total))

    if bench.cost_mode == "spatial":
        regions = [r for _, regions in decoded for r in regions]
        if regions:
            for level, long_side in enumerate(baseline_long_sides(bench)):
                mask = build_mask(regions, scene.l_max, long_side, n_d, params.context_stride, scene.dims)
                total, density = _detector_flops(bench.detector, mask.target_dims, mask.grid, n_d)
                report.rows.append(CostRow(index, "planned", level, long_side, mask.target_dims, density, total))
    else:
        for level, plan_level in enumerate(plan.levels):
            dims = plan_level.mask.target_dims
            grid = plan_level.mask.grid if bench.cost_mode == "both" else None
            total, density = _detector_flops(bench.detector, dims, grid, n_d)
            report.rows.append(CostRow(index, "planned", level, plan_level.l_t, dims, density, total))

    if bench.include_attention_cost and network is not None:
        dims = resized_dims(scene.dims, bench.attention_input)
        total, _ = _detector_flops([layer.conv for layer in network.layers], dims, None, n_d)
        report.rows.append(CostRow(index, "attention", 0, float(bench.attention_input), dims, 1.0, total))

    return report, plan, decoded


def cost_report(
    scenes: Sequence[Scene],
    params: DecodeParams,
    bench: BenchConfig,
    predictor: Predictor,
    scalemap: ScaleMapConfig = DEFAULT_SCALEMAP,
    network: Optional[NetworkSpec] = None,
    workers: int = 1,
    maps: Optional[Sequence[AttentionMaps]] = None,
) -> CostReport:
    """
    Dense-pyramid versus planned-pyramid detector FLOPs over all scenes.

    Rows are merged in scene order; totals are the sums of the rows.
    """
    if maps is None:
        maps = predict_all(scenes, predictor, workers)
    per_scene = ordered_map(
        lambda item: scene_cost(item[0], item[1][0], item[1][1], params, bench, scalemap, network)[0],
        list(enumerate(zip(scenes, maps))),
        workers,
    )
    report = CostReport(bench.cost_mode)
    for part in per_scene:
        report.extend(part)
    logger.info(
        f"Cost ({bench.cost_mode}): baseline {report.baseline} planned {report.planned} speedup {report.speedup}"
    )
    return report


def speed_recall_curve(
    scenes: Sequence[Scene],
    params: DecodeParams,
    bench: BenchConfig,
    predictor: Predictor,
    scalemap: ScaleMapConfig = DEFAULT_SCALEMAP,
    network: Optional[NetworkSpec] = None,
    workers: int = 1,
    maps: Optional[Sequence[AttentionMaps]] = None,
    points: Optional[Sequence[EvalPoint]] = None,
) -> List[Dict[str, Any]]:
    """FLOP speedup and recall at every threshold of the sweep."""
    if maps is None:
        maps = predict_all(scenes, predictor, workers)
    if points is None:
        points = eval_recall_ratio(scenes, params, predictor, scalemap, workers, maps)
    curve = []
    for point in points:
        decode = params.with_threshold(point.threshold)
        report = cost_report(scenes, decode, bench, predictor, scalemap, network, workers, maps)
        curve.append({"threshold": point.threshold, "recall": point.recall, "speedup": report.speedup})
    return curve


def run_pipeline(
    scene: Scene,
    predictor: Predictor,
    params: DecodeParams,
    bench: BenchConfig,
    scalemap: ScaleMapConfig = DEFAULT_SCALEMAP,
    network: Optional[NetworkSpec] = None,
) -> PipelineResult:
    """Predict, decode and plan one scene, with its cost rows."""
    f = predictor.predict(scene)
    report, plan, decoded = scene_cost(0, scene, f, params, bench, scalemap, network)
    return PipelineResult(plan=plan, proposals=decoded, cost=report)


def bench_conv(
    specs: Sequence[ConvSpec],
    input_dims: Tuple[int, int],
    densities: Sequence[float],
    seed: int = 0,
    repeats: int = 3,
    workers: int = 1,
) -> List[ConvTiming]:
    """Dense versus masked wall-clock for every (spec, density) pair."""
    return [
        time_conv(spec, input_dims, density, seed=seed, repeats=repeats, workers=workers)
        for spec in specs
        for density in densities
    ]


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Sequence[Dict[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode="w", newline="", encoding="utf-8") as csv_file:
        writer = csv.DictWriter(csv_file, fieldnames=list(header), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def write_summary(path: Union[str, Path], summary: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path
