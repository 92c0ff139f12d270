import numpy as np
import pytest

from mono4d.core import invert, unproject
from mono4d.corr import sample_cloud
from mono4d.synth import (
    PRESETS,
    _primitives,
    build_scene,
    camera_pose,
    dynamic_id,
    grid_queries,
    make_scene,
    with_frames,
)

MARGIN = 1e-4


def test_scenes_are_deterministic():
    a = build_scene(make_scene("default", 7, 5, 48, 64), grid=9)
    b = build_scene(make_scene("default", 7, 5, 48, 64), grid=9)
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa.depth.values, fb.depth.values)
        np.testing.assert_array_equal(fa.dynamic.values, fb.dynamic.values)
    np.testing.assert_array_equal(a.tracks.positions, b.tracks.positions)
    c = build_scene(make_scene("default", 8, 5, 48, 64), grid=9)
    assert not np.array_equal(a.frames[1].depth.values, c.frames[1].depth.values)


def test_shorter_scene_is_a_prefix():
    spec = make_scene("default", 3, 8, 48, 64)
    long = build_scene(spec, grid=9)
    short = build_scene(with_frames(spec, 4), grid=9)
    for fa, fb in zip(short.frames, long.frames):
        np.testing.assert_array_equal(fa.depth.values, fb.depth.values)
    np.testing.assert_array_equal(short.tracks.positions, long.tracks.positions[:, :4])


@pytest.mark.parametrize("preset", PRESETS)
def test_presets_render(preset):
    scene = build_scene(make_scene(preset, 0, 3, 48, 64), grid=5)
    for f in scene.frames:
        assert f.depth.valid.mean() > 0.9
        assert np.all(f.depth.values[f.depth.valid] > 0)
    moving = [f.dynamic.values.sum() for f in scene.frames]
    assert (sum(moving) == 0) == (preset == "static")


def test_depth_cloud_and_world_agree(short_scene):
    for f in short_scene.frames:
        cloud = unproject(f.depth, short_scene.intrinsics)
        np.testing.assert_allclose(cloud.points[f.depth.valid], f.cloud.points[f.depth.valid], atol=1e-12)
        world = f.pose.apply(f.cloud.points[f.depth.valid])
        np.testing.assert_allclose(world, f.world[f.depth.valid], atol=1e-9)


def test_dynamic_mask_is_the_moving_object(short_scene):
    k = dynamic_id(short_scene.spec)
    for f in short_scene.frames:
        np.testing.assert_array_equal(f.dynamic.values > 0, f.object_id == k)


def test_flow_lands_on_the_same_static_surface(short_scene):
    k = dynamic_id(short_scene.spec)
    for t, flow in enumerate(short_scene.flows):
        a, b = short_scene.frames[t], short_scene.frames[t + 1]
        targets = flow.targets().reshape(-1, 2)
        ok = flow.valid.ravel() & a.depth.valid.ravel() & (a.object_id.ravel() != k)
        # keep pixels whose target bilinear stencil sits on a single facet
        landed, valid = sample_cloud(b.cloud, targets[ok])
        world = b.pose.apply(landed[valid])
        expected = a.world.reshape(-1, 3)[ok][valid]
        err = np.linalg.norm(world - expected, axis=1)
        assert np.quantile(err, 0.9) < 1e-6


def test_grid_queries_are_pixel_centers():
    q = grid_queries((96, 128), 35)
    assert q.shape == (35 * 35, 2)
    np.testing.assert_array_equal(q % 1.0, 0.5)
    assert q[:, 0].min() >= 0 and q[:, 0].max() < 128 and q[:, 1].max() < 96


def _box_distance(local, half):
    """Chebyshev-style signed distance: negative strictly inside the box."""
    return np.max(np.abs(local) - half, axis=-1)


def oracle_visibility(spec, world, t, samples=400):
    """Visible / occluded / None (ambiguous) by sampling the segment to the camera."""
    intr = spec.intrinsics
    pose = camera_pose(spec, t)
    cam = invert(pose).apply(world[None])[0]
    if cam[2] <= MARGIN:
        return False
    x = intr.fx * cam[0] / cam[2] + intr.cx
    y = intr.fy * cam[1] / cam[2] + intr.cy
    border = min(x, intr.width - x, y, intr.height - y)
    if abs(border) < 1e-3:
        return None
    if border < 0:
        return False
    # sample strictly between the camera and a point just short of the surface
    fractions = np.linspace(0.0, 1.0, samples)[1:-1] * (1 - 1e-3)
    seg = pose.translation + fractions[:, None] * (world - pose.translation)
    occluded = False
    for prim, half in zip(*_primitives(spec, t)):
        d = _box_distance(invert(prim).apply(seg), half)
        if np.min(np.abs(d)) < MARGIN * 10:
            return None
        occluded |= bool(np.any(d < 0))
    if np.any(seg[:, 2] < -MARGIN):
        occluded = True
    return not occluded


def test_track_visibility_matches_segment_oracle():
    spec = make_scene("default", 2, 10, 48, 64)
    scene = build_scene(spec, grid=12)
    to_world = camera_pose(spec, 0)
    checked = mismatches = 0
    for k, traj in enumerate(scene.trajectories):
        if not np.all(np.isfinite(traj.positions[0])):
            continue
        world = to_world.apply(traj.positions)
        for t in range(spec.n_frames):
            expected = oracle_visibility(spec, world[t], t)
            if expected is None:
                continue
            checked += 1
            mismatches += expected != bool(scene.tracks.visible[k, t])
    assert checked > 1000
    assert mismatches == 0


def test_trajectories_start_at_query_pixels(short_scene):
    gt = short_scene.ground_truth()
    pts, ok = sample_cloud(gt.frames[0], short_scene.tracks.positions[:, 0])
    for k, traj in enumerate(short_scene.trajectories):
        if traj.visible[0] and ok[k]:
            np.testing.assert_allclose(pts[k], traj.positions[0], atol=1e-6)


def test_static_trajectories_stay_put(static_scene):
    for traj in static_scene.trajectories[:200]:
        pts = traj.positions[np.all(np.isfinite(traj.positions), axis=1)]
        if len(pts):
            np.testing.assert_allclose(pts, np.broadcast_to(pts[0], pts.shape), atol=1e-9)


def test_ground_truth_is_relative_to_first_frame(short_scene):
    gt = short_scene.ground_truth()
    np.testing.assert_allclose(gt.poses[0].matrix, np.eye(4), atol=1e-12)
    f0 = short_scene.frames[0]
    np.testing.assert_allclose(gt.frames[0].points[f0.depth.valid], f0.cloud.points[f0.depth.valid], atol=1e-12)
