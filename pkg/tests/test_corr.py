import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mono4d.core import DepthMap, FrameCloud
from mono4d.corr import (
    BilinearSampler,
    ConfidenceMask,
    FlowField,
    TrackSet,
    compose_pseudo_mask,
    flow_pair_mask,
    flying_pixel_mask,
    sample_cloud,
    sample_confidence,
    warp_cloud,
)
from mono4d.errors import InputShapeError


def random_cloud(rng, h=12, w=16):
    pts = rng.normal(size=(h, w, 3))
    return FrameCloud(pts, np.ones((h, w), bool))


def bilinear_oracle(grid, x, y):
    """Direct textbook bilinear lookup with pixel centers at +0.5."""
    u, v = x - 0.5, y - 0.5
    h, w = grid.shape[:2]
    j0 = min(int(np.floor(u)), w - 2)
    i0 = min(int(np.floor(v)), h - 2)
    a, b = u - j0, v - i0
    return (
        (1 - a) * (1 - b) * grid[i0, j0]
        + a * (1 - b) * grid[i0, j0 + 1]
        + (1 - a) * b * grid[i0 + 1, j0]
        + a * b * grid[i0 + 1, j0 + 1]
    )


def test_zero_flow_warp_is_identity(rng):
    cloud = random_cloud(rng)
    out = warp_cloud(cloud, FlowField.zeros(cloud.shape))
    np.testing.assert_array_equal(out.points, cloud.points)
    assert out.valid.all()


def test_integer_flow_shifts_exactly(rng):
    cloud = random_cloud(rng)
    h, w = cloud.shape
    flow = FlowField(np.full((h, w), 2.0), np.full((h, w), -1.0))
    out = warp_cloud(cloud, flow)
    np.testing.assert_array_equal(out.points[1:, : w - 2], cloud.points[:-1, 2:])
    assert not out.valid[0].any() and not out.valid[:, w - 2 :].any()


def test_sampler_matches_oracle(rng):
    grid = rng.normal(size=(9, 11))
    pos = np.column_stack([rng.uniform(0.5, 10.5, 200), rng.uniform(0.5, 8.5, 200)])
    got = BilinearSampler(pos, grid.shape).sample(grid)
    want = [bilinear_oracle(grid, x, y) for x, y in pos]
    np.testing.assert_allclose(got, want, atol=1e-14)


def test_sampler_domain(rng):
    s = BilinearSampler(np.array([[0.5, 0.5], [10.5, 8.5], [0.49, 3.0], [3.0, 8.51]]), (9, 11))
    np.testing.assert_array_equal(s.valid(np.ones((9, 11), bool)), [True, True, False, False])


def test_invalid_corner_invalidates_only_when_weighted(rng):
    cloud = random_cloud(rng)
    valid = cloud.valid.copy()
    valid[5, 5] = False
    pts = cloud.points.copy()
    pts[5, 5] = np.nan
    cloud = FrameCloud(pts, valid)
    # exactly on pixel (5, 4): neighbor (5, 5) carries zero weight
    _, ok = sample_cloud(cloud, np.array([[4.5, 5.5], [5.0, 5.5], [5.5, 5.5]]))
    np.testing.assert_array_equal(ok, [True, False, False])


@given(st.floats(0.5, 15.5), st.floats(0.5, 11.5))
def test_bilinear_reproduces_affine_fields(x, y):
    h, w = 12, 16
    xs, ys = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    grid = np.stack([2 * xs - ys + 1, 0.5 * ys, xs * 0 + 3], -1)
    out = BilinearSampler(np.array([[x, y]]), (h, w)).sample(grid)[0]
    np.testing.assert_allclose(out, [2 * x - y + 1, 0.5 * y, 3], atol=1e-12)


def flying_oracle(depth, valid, thr):
    h, w = depth.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            if not valid[i, j]:
                continue
            ok = True
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    a, b = i + di, j + dj
                    if (di or dj) and 0 <= a < h and 0 <= b < w and valid[a, b]:
                        d0, d1 = depth[i, j], depth[a, b]
                        if abs(d0 - d1) / min(d0, d1) > thr:
                            ok = False
            out[i, j] = 1.0 if ok else 0.0
    return out


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.3))
def test_flying_pixel_mask_matches_oracle(seed, thr):
    rng = np.random.default_rng(seed)
    depth = rng.uniform(1.0, 1.3, (7, 9))
    valid = rng.uniform(size=(7, 9)) > 0.15
    got = flying_pixel_mask(DepthMap(depth, valid), thr).values
    np.testing.assert_array_equal(got, flying_oracle(depth, valid, thr))


def test_flying_pixels_on_a_step():
    depth = np.ones((6, 8))
    depth[:, 4:] = 2.0
    mask = flying_pixel_mask(DepthMap.from_array(depth), 0.05).values
    assert not mask[:, 3:5].any()
    assert mask[:, :3].all() and mask[:, 5:].all()
    assert flying_pixel_mask(DepthMap.from_array(np.ones((3, 3)))).values.all()


def test_compose_pseudo_mask():
    dyn = ConfidenceMask(np.array([[0.0, 1.0], [0.25, 0.0]]))
    edges = ConfidenceMask(np.array([[1.0, 1.0], [1.0, 0.0]]))
    flow_ok = np.array([[True, True], [True, True]])
    np.testing.assert_allclose(
        compose_pseudo_mask(dyn, edges, flow_ok).values, [[1.0, 0.0], [0.75, 0.0]]
    )
    with pytest.raises(InputShapeError):
        compose_pseudo_mask(dyn, edges, np.ones((3, 3), bool))


def test_sample_confidence_zero_next_to_rejected_pixels():
    m = np.ones((5, 5))
    m[2, 2] = 0.0
    mask = ConfidenceMask(m)
    pos = np.array([[1.5, 1.5], [2.0, 2.0], [3.0, 3.0], [4.5, 4.5], [-1.0, 2.0]])
    np.testing.assert_array_equal(sample_confidence(mask, pos), [1.0, 0.0, 0.0, 1.0, 0.0])


def test_flow_pair_mask_combines_both_frames():
    shape = (4, 6)
    flow = FlowField(np.ones(shape), np.zeros(shape))
    later = np.ones(shape)
    later[1, 3] = 0.0
    mask = flow_pair_mask(
        ConfidenceMask.zeros(shape), ConfidenceMask.ones(shape), flow, ConfidenceMask(later)
    ).values
    assert mask[1, 2] == 0.0  # lands on the rejected pixel
    assert mask[1, 1] == 1.0
    assert not mask[:, 5].any()  # leaves the image


def test_flow_validity_includes_nan():
    du = np.zeros((2, 2))
    du[0, 0] = np.nan
    assert FlowField(du, np.zeros((2, 2))).valid.sum() == 3


def test_confidence_range_checked():
    with pytest.raises(ValueError):
        ConfidenceMask(np.array([[1.5]]))


def test_trackset_validation_and_slicing():
    pos = np.zeros((3, 4, 2))
    vis = np.ones((3, 4), bool)
    tracks = TrackSet(pos, vis)
    assert tracks.frames(1, 3).num_frames == 2
    assert tracks.subset(np.array([True, False, True])).num_tracks == 2
    bad = pos.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        TrackSet(bad, vis)
    vis2 = vis.copy()
    vis2[0, 0] = False
    assert TrackSet(bad, vis2).num_tracks == 3
