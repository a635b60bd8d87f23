"""
Tests for decoding attention maps into scale proposals, regions, masks and pyramid plans.
"""

import logging

import numpy as np
import pytest

from src.api.geometry import BBox
from src.api.labels import AttentionMaps, attention_center, render_labels
from src.api.scalemap import bin_to_size, size_to_bin, zoomed_size
from src.api.sscu import (
    PyramidPlan,
    RegionProposal,
    ScaleProposal,
    SpatialMask,
    build_mask,
    decode_attention,
    decode_locations,
    location_map,
    mask_dims,
    nms_1d,
    plan_pyramid,
    resized_dims,
    scale_vector,
    smooth,
)
from src.core.config import DecodeParams, ScaleMapConfig
from src.core.utils import InvalidInputError

# Configure logging
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
logger = logging.getLogger(__name__)

DIMS = (1024, 1024)
N_S = 16
ORACLE = DecodeParams(smooth_window=1, nms_radius=4, neighborhood=4, threshold=0.5)


def _face(cx: float, cy: float, b: int, l_max: float = 1024) -> BBox:
    """A square face whose size sits just inside bin b."""
    return BBox.from_center(cx, cy, bin_to_size(b, l_max) * 2**-0.05)


def _empty_maps() -> AttentionMaps:
    return render_labels([], DIMS, N_S)


def test_scale_vector_zero():
    """All-zero maps give an all-zero scale vector."""
    s_v = scale_vector(_empty_maps())
    assert s_v.shape == (60,)
    assert not s_v.any()


def test_scale_vector_single_face_profile():
    """One face yields the halving profile around its bin."""
    f = render_labels([BBox.from_center(512, 512, 2**6.5)], DIMS, N_S)
    s_v = scale_vector(f)
    for i in range(-4, 5):
        assert s_v[25 - 1 + i] == pytest.approx(0.5 ** abs(i))
    assert s_v.sum() == pytest.approx(1 + 2 * (0.5 + 0.25 + 0.125 + 0.0625))


def test_scale_vector_two_peaks():
    """Two faces at bins 20 and 40 give two unit peaks."""
    f = render_labels([_face(200, 200, 20), _face(700, 700, 40)], DIMS, N_S)
    s_v = scale_vector(f)
    assert s_v[19] == pytest.approx(1.0)
    assert s_v[39] == pytest.approx(1.0)
    assert np.flatnonzero(s_v == 1.0).tolist() == [19, 39]


def test_smooth_identity_and_constant():
    """Window 1 is the identity and constants stay constant."""
    rng = np.random.default_rng(0)
    s = rng.uniform(size=60)
    assert np.array_equal(smooth(s, 1), s)
    assert np.allclose(smooth(np.full(60, 0.3), 5), 0.3)


def test_smooth_impulse():
    """An impulse spreads evenly over a window of three."""
    s = np.zeros(60)
    s[29] = 1.0
    out = smooth(s, 3)
    assert out[28:31] == pytest.approx([1 / 3, 1 / 3, 1 / 3])
    assert out.sum() == pytest.approx(1.0)


def test_smooth_truncates_at_edges():
    """Edge values average over the in-range part of the window."""
    out = smooth(np.array([3.0, 0.0, 0.0, 0.0]), 3)
    assert out[0] == pytest.approx(1.5)
    assert out[1] == pytest.approx(1.0)


def test_smooth_window_longer_than_vector():
    """A window wider than the vector keeps its length and leaves constants unchanged."""
    out = smooth(np.ones(3), 5)
    assert out.shape == (3,)
    assert np.allclose(out, 1.0)
    assert smooth(np.array([0.0, 3.0]), 7) == pytest.approx([1.5, 1.5])
    assert [p.b for p in nms_1d(smooth(np.ones(3), 5), 4, 0.5)] == [1]


def test_decode_attention_small_bin_layout():
    """Two bins with a wide smoothing window decode without proposing bins past the layout."""
    cfg = ScaleMapConfig(num_bins=2, bins_per_octave=1, base_exponent=4, top_exponent=6)
    f = AttentionMaps(np.ones((2, 4, 4), dtype=np.float32), 16, (64, 64))
    decoded = decode_attention(f, DecodeParams(smooth_window=5), cfg)
    assert [proposal.b for proposal, _ in decoded] == [1]
    assert all(1 <= r.b <= 2 for _, regions in decoded for r in regions)


def test_smooth_rejects_bad_window():
    """Even and non-positive windows are rejected."""
    for window in (0, 2, -1):
        with pytest.raises(InvalidInputError):
            smooth(np.zeros(5), window)


def test_nms_examples():
    """Distant peaks both survive and close peaks suppress each other."""
    assert nms_1d(np.zeros(60), 4, 0.5) == []

    s = np.zeros(60)
    s[19], s[39] = 0.9, 0.8
    assert [p.b for p in nms_1d(s, 4, 0.5)] == [20, 40]

    s = np.zeros(60)
    s[19], s[22] = 0.9, 0.8
    proposals = nms_1d(s, 4, 0.5)
    assert [(p.b, p.score) for p in proposals] == [(20, pytest.approx(0.9))]


def test_nms_ties_go_to_smaller_bin():
    """Equal peaks within the radius keep the smaller bin."""
    s = np.zeros(60)
    s[10], s[12] = 0.7, 0.7
    assert [p.b for p in nms_1d(s, 4, 0.5)] == [11]


def test_nms_separation():
    """Surviving bins are pairwise more than radius apart and above threshold."""
    rng = np.random.default_rng(2)
    for _ in range(50):
        s = rng.uniform(size=60)
        proposals = nms_1d(s, 4, 0.3)
        bins = sorted(p.b for p in proposals)
        assert all(b2 - b1 > 4 for b1, b2 in zip(bins, bins[1:]))
        assert all(p.score >= 0.3 for p in proposals)


def test_location_map_clips_channels():
    """The location window is cut at the bin range ends."""
    f = render_labels([_face(300, 300, 3)], DIMS, N_S)
    c_1 = location_map(f, 1)
    assert c_1.max() == pytest.approx(1.0)
    with pytest.raises(InvalidInputError):
        location_map(f, 61)


def test_decode_locations_empty():
    """All-zero maps decode no regions."""
    assert decode_locations(_empty_maps(), 25, 0.5) == []


def test_decode_locations_single_face():
    """One face decodes to one region at its attention center with the bin's size."""
    box = _face(333, 611, 30)
    f = render_labels([box], DIMS, N_S)
    center = attention_center(box, N_S, DIMS)
    assert center.b == 30
    for query in (center.b, center.b + 3):
        regions = decode_locations(f, query, 0.5)
        assert len(regions) == 1, f"Query bin {query}"
        region = regions[0]
        assert region.cell == (center.u, center.v)
        assert region.center == ((center.u + 0.5) * N_S, (center.v + 0.5) * N_S)
        assert region.side == pytest.approx(bin_to_size(query, 1024))


def test_decode_locations_orders_by_score():
    """Regions come back by descending score."""
    data = np.zeros((60, 64, 64), dtype=np.float32)
    data[24, 10, 10] = 0.7
    data[24, 40, 40] = 0.9
    f = AttentionMaps(data, N_S, DIMS)
    regions = decode_locations(f, 25, 0.5)
    assert [r.cell for r in regions] == [(40, 40), (10, 10)]


def test_decode_locations_merges_adjacent_cells():
    """Touching cells form one component whose peak is reported."""
    data = np.zeros((60, 64, 64), dtype=np.float32)
    data[24, 10, 10] = 0.6
    data[24, 11, 11] = 0.8
    regions = decode_locations(AttentionMaps(data, N_S, DIMS), 25, 0.5)
    assert len(regions) == 1
    assert regions[0].cell == (11, 11)
    assert regions[0].score == pytest.approx(0.8)


def test_raising_threshold_never_adds_regions():
    """Region counts fall or stay as the threshold rises on isolated peaks."""
    rng = np.random.default_rng(3)
    data = np.zeros((60, 64, 64), dtype=np.float32)
    for _ in range(30):
        v, u = rng.integers(0, 32, size=2) * 2
        data[24, v, u] = rng.uniform(0.1, 1.0)
    f = AttentionMaps(data, N_S, DIMS)
    counts = [len(decode_locations(f, 25, t)) for t in np.linspace(0.05, 0.95, 19)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_build_mask_empty():
    """No regions give an all-zero mask of the right shape."""
    mask = build_mask([], 1024, 512, 16, 16, DIMS)
    assert mask.grid.shape == (32, 32)
    assert not mask.grid.any()


def test_build_mask_full_image():
    """A region covering the image sets every cell."""
    region = RegionProposal(center=(512.0, 512.0), side=1024.0, b=60, score=1.0, cell=(32, 32))
    mask = build_mask([region], 1024, 1024, 16, 16, DIMS)
    assert mask.grid.all()


def test_build_mask_centered_face_density():
    """A centered 2^6.5 face with a 2 * n_s context margin covers about 1.5% of cells."""
    region = RegionProposal(center=(512.0, 512.0), side=2**6.5, b=25, score=1.0, cell=(32, 32))
    mask = build_mask([region], 1024, 1024, 16, 16, DIMS)
    analytic = (2**6.5 + 32) ** 2 / 1024**2
    assert 0.010 <= mask.density <= 0.020
    assert abs(mask.density - analytic) < 0.005
    assert mask.grid.sum() == 64


def test_build_mask_scales_regions():
    """Regions follow the resize to the target long side."""
    region = RegionProposal(center=(256.0, 256.0), side=64.0, b=25, score=1.0, cell=(16, 16))
    mask = build_mask([region], 1024, 512, 16, 0, DIMS)
    assert mask.target_dims == (512, 512)
    rows, cols = np.nonzero(mask.grid)
    # scaled box spans 112..144, cell centers 120 and 136 are inside
    assert sorted(set(rows.tolist())) == [7, 8]
    assert sorted(set(cols.tolist())) == [7, 8]


def test_build_mask_monotone_in_regions():
    """Adding a region never clears a cell."""
    rng = np.random.default_rng(4)
    regions = []
    for _ in range(8):
        cx, cy = (float(c) for c in rng.uniform(0, 1024, size=2))
        regions.append(RegionProposal(center=(cx, cy), side=float(rng.uniform(20, 200)), b=25, score=1.0, cell=(0, 0)))
    previous = build_mask([], 1024, 700, 16, 16, DIMS).grid
    for i in range(1, len(regions) + 1):
        grid = build_mask(regions[:i], 1024, 700, 16, 16, DIMS).grid
        assert np.all(grid[previous])
        previous = grid


def test_build_mask_rejects_bad_stride():
    """The detector stride must be positive."""
    with pytest.raises(InvalidInputError):
        build_mask([], 1024, 1024, 0, 16, DIMS)


def test_spatial_mask_serialization(tmp_path):
    """Masks survive the run-length form and export as binary PGM."""
    region = RegionProposal(center=(300.0, 200.0), side=80.0, b=25, score=1.0, cell=(0, 0))
    mask = build_mask([region], 1024, 1024, 16, 16, (768, 1024))
    restored = SpatialMask.from_dict(mask.to_dict())
    assert np.array_equal(restored.grid, mask.grid)
    assert mask.grid.shape == mask_dims((768, 1024), 16)

    pgm = mask.to_pgm()
    assert pgm.startswith(b"P5\n64 48\n255\n")
    assert len(pgm) == len(b"P5\n64 48\n255\n") + 64 * 48
    assert mask.save_pgm(tmp_path / "mask.pgm").read_bytes() == pgm


def test_spatial_mask_shape_checked():
    """A grid that does not match the target dims is rejected."""
    with pytest.raises(InvalidInputError):
        SpatialMask(np.zeros((3, 3)), 16, (64, 64))


def test_resized_dims():
    """Resizing keeps the aspect ratio."""
    assert resized_dims((768, 1024), 512) == (384, 512)
    assert resized_dims((10, 1000), 50) == (1, 50)


def test_plan_pyramid_empty():
    """No proposals plan no levels."""
    plan = plan_pyramid([], _empty_maps())
    assert plan.levels == []
    assert PyramidPlan().to_dict() == {"levels": []}


def test_plan_pyramid_single_level():
    """A face at bin 25 in a 1024 image keeps the image size."""
    f = render_labels([_face(512, 512, 25)], DIMS, N_S)
    plan = plan_pyramid([ScaleProposal(25, 1.0)], f, 1024)
    assert len(plan.levels) == 1
    assert plan.levels[0].l_t == pytest.approx(1024.0)
    assert plan.levels[0].mask.grid.any()


def test_plan_pyramid_two_levels():
    """Faces at bins 25 and 35 plan levels at 1024 and 512, largest first."""
    f = render_labels([_face(200, 200, 25), _face(700, 700, 35)], DIMS, N_S)
    plan = plan_pyramid([ScaleProposal(35, 1.0), ScaleProposal(25, 1.0)], f, 1024)
    assert [round(level.l_t) for level in plan.levels] == [1024, 512]
    assert [level.proposal.b for level in plan.levels] == [25, 35]
    assert [len(level.regions) for level in plan.levels] == [1, 1]
    assert plan.levels[1].mask.target_dims == (512, 512)


def test_plan_pyramid_merges_equal_levels():
    """Proposals whose target lengths round within a pixel share one level."""
    f = render_labels([_face(200, 200, 25)], DIMS, N_S)
    plan = plan_pyramid([ScaleProposal(25, 0.6), ScaleProposal(25, 0.9)], f, 1024)
    assert len(plan.levels) == 1
    assert plan.levels[0].proposal.score == pytest.approx(0.9)


def test_plan_pyramid_json_is_deterministic():
    """Plans serialize identically regardless of worker count."""
    f = render_labels([_face(200, 200, 20), _face(600, 500, 30), _face(800, 200, 40)], DIMS, N_S)
    proposals = nms_1d(scale_vector(f), 4, 0.5)
    serial = plan_pyramid(proposals, f, workers=1).to_json()
    threaded = plan_pyramid(proposals, f, workers=4).to_json()
    assert serial == threaded


def _random_scene(rng: np.random.Generator):
    """Faces in well-separated cells with bins that are equal or more than four apart."""
    groups = [12, 20, 28, 36, 44]
    count = int(rng.integers(1, 6))
    faces, cells = [], []
    while len(faces) < count:
        b = int(rng.choice(groups))
        u, v = (int(c) for c in rng.integers(12, 52, size=2))
        if any(max(abs(u - pu), abs(v - pv)) <= 1 for pu, pv in cells):
            continue
        cells.append((u, v))
        faces.append(_face((u + 0.5) * N_S, (v + 0.5) * N_S, b))
    return faces


def test_oracle_decode_recovers_every_face():
    """Ground-truth maps decode every face exactly once with few extra regions."""
    rng = np.random.default_rng(5)
    for trial in range(30):
        faces = _random_scene(rng)
        f = render_labels(faces, DIMS, N_S)
        decoded = decode_attention(f, ORACLE)
        regions = [region for _, regions in decoded for region in regions]
        assert len(regions) <= 1.2 * len(faces), f"Trial {trial}: {len(regions)} regions for {len(faces)} faces"

        for face in faces:
            center = attention_center(face, N_S, DIMS)
            hits = [
                r
                for r in regions
                if abs(r.b - center.b) <= 4 and max(abs(r.cell[0] - center.u), abs(r.cell[1] - center.v)) <= 1
            ]
            assert len(hits) == 1, f"Trial {trial}: face at bin {center.b} matched {len(hits)} times"


def test_zoomed_recall():
    """With exact scale estimates every face lands just under the anchor size after its level's resize."""
    rng = np.random.default_rng(6)
    for _ in range(10):
        faces = _random_scene(rng)
        f = render_labels(faces, DIMS, N_S)
        plan = plan_pyramid(nms_1d(scale_vector(f), 4, 0.5), f, 1024)
        for face in faces:
            size = face.width
            b = size_to_bin(size, 1024).b
            level = next(level for level in plan.levels if abs(level.proposal.b - b) <= 4)
            assert level.proposal.b == b
            zoomed = size * level.l_t / 1024
            assert 2**6.4 < zoomed <= 2**6.5 + 1e-9
            assert zoomed == pytest.approx(zoomed_size(size, bin_to_size(level.proposal.b, 1024), 1024))
