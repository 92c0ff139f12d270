import numpy as np
import pytest

from mono4d.core import CloudSequence, FrameCloud, PoseSE3, SimTransform, random_rotation
from mono4d.corr import ConfidenceMask
from mono4d.errors import StitchError, StreamError
from mono4d.pipeline import (
    WindowConfig,
    iter_stream,
    reconstruct_stream,
    reconstruct_window,
    stitch,
    window_bounds,
)


def max_gap(a, b):
    gaps = []
    for fa, fb in zip(a.frames, b.frames):
        both = fa.valid & fb.valid
        gaps.append(np.max(np.linalg.norm(fa.points[both] - fb.points[both], axis=1)))
    return max(gaps)


def test_window_config_validation():
    assert WindowConfig(4, 1).stride == 3
    for window, overlap in [(1, 0), (4, 0), (4, 4), (3, 5)]:
        with pytest.raises(ValueError):
            WindowConfig(window, overlap)


@pytest.mark.parametrize(
    "n, window, overlap, expected",
    [
        (4, 4, 1, [(0, 4)]),
        (10, 4, 1, [(0, 4), (3, 7), (6, 10)]),
        (11, 4, 1, [(0, 4), (3, 7), (6, 10), (9, 11)]),
        (6, 3, 2, [(0, 3), (1, 4), (2, 5), (3, 6)]),
        (2, 5, 1, [(0, 2)]),
    ],
)
def test_window_bounds(n, window, overlap, expected):
    bounds = window_bounds(n, WindowConfig(window, overlap))
    assert bounds == expected
    # consecutive windows share exactly `overlap` frames, except a short tail
    for (a0, a1), (b0, b1) in zip(bounds, bounds[1:]):
        assert a1 - b0 == overlap


def _random_sequence(rng, n, shape=(6, 8)):
    frames = []
    for _ in range(n):
        valid = rng.random(shape) > 0.2
        points = rng.normal(size=shape + (3,))
        points[~valid] = np.nan
        frames.append(FrameCloud(points, valid))
    poses = [PoseSE3.identity()] + [
        PoseSE3(random_rotation(rng), rng.normal(size=3)) for _ in range(n - 1)
    ]
    return CloudSequence(frames, poses, None)


def test_stitch_identity_overlap(rng):
    prev = _random_sequence(rng, 4)
    nxt = CloudSequence(prev.frames[-1:] + _random_sequence(rng, 2).frames[1:], prev.poses[-1:] * 2, None)
    out, sim = stitch(prev, nxt, 1)
    assert sim.scale == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(sim.rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(sim.translation, 0.0, atol=1e-9)
    assert len(out) == 5


@pytest.mark.parametrize("overlap", [1, 2])
def test_stitch_recovers_known_similarity(rng, overlap):
    prev = _random_sequence(rng, 4)
    truth = SimTransform(1.7, random_rotation(rng), rng.normal(size=3))
    inverse = truth.inverse()
    # next window sees prev's tail and two more frames in its own coordinates
    shared = [
        FrameCloud(np.where(f.valid[..., None], inverse.apply(f.points), np.nan), f.valid)
        for f in prev.frames[-overlap:]
    ]
    extra = _random_sequence(rng, 3).frames[1:]
    nxt = CloudSequence(shared + extra, [PoseSE3.identity()] * (overlap + 2), None)
    out, sim = stitch(prev, nxt, overlap)
    assert sim.scale == pytest.approx(truth.scale, abs=1e-9)
    np.testing.assert_allclose(sim.rotation, truth.rotation, atol=1e-9)
    np.testing.assert_allclose(sim.translation, truth.translation, atol=1e-9)
    assert len(out) == len(prev) + 2
    # prev is kept bit-exact as the prefix
    for a, b in zip(out.frames[: len(prev)], prev.frames):
        np.testing.assert_array_equal(a.points, b.points)
    for f, g in zip(out.frames[len(prev):], extra):
        np.testing.assert_allclose(f.points[g.valid], truth.apply(g.points[g.valid]), atol=1e-9)


def test_stitch_rejects_bad_overlap(rng):
    prev = _random_sequence(rng, 2)
    with pytest.raises(ValueError):
        stitch(prev, prev, 3)
    with pytest.raises(ValueError):
        stitch(prev, prev, 0)


def test_degenerate_overlap_raises_stitch_error(rng):
    shape = (4, 4)
    pts = np.zeros(shape + (3,))
    pts[..., 0] = np.arange(16).reshape(shape)  # collinear points
    flat = FrameCloud(pts, np.ones(shape, bool))
    seq = CloudSequence([flat], [PoseSE3.identity()], None)
    with pytest.raises(StitchError) as info:
        stitch(seq, seq, 1, window=5)
    assert info.value.window == 5


def test_single_window_equals_reconstruct_window(short_scene):
    inputs = short_scene.inputs().window(0, 4)
    whole = reconstruct_window(inputs)
    streamed = reconstruct_stream(inputs, WindowConfig(4, 1))
    assert len(streamed) == 4
    for a, b in zip(whole.frames, streamed.frames):
        np.testing.assert_array_equal(a.points, b.points)


@pytest.mark.parametrize("window, overlap", [(4, 1), (5, 2), (3, 2)])
def test_stream_covers_every_frame_in_order(short_scene, window, overlap):
    inputs = short_scene.inputs()
    order = [t for t, _, _ in iter_stream(inputs, WindowConfig(window, overlap))]
    assert order == list(range(inputs.num_frames))


def test_static_scene_windows_coincide(static_scene):
    inputs = static_scene.inputs().window(0, 12)
    seq = reconstruct_stream(inputs, WindowConfig(4, 1))
    truth = CloudSequence(static_scene.ground_truth().frames[:12], static_scene.poses[:12], None)
    assert max_gap(seq, truth) < 2e-3 * static_scene.diameter()
    np.testing.assert_array_equal(seq.poses[0].matrix, np.eye(4))


def test_windowed_close_to_whole_sequence(short_scene):
    inputs = short_scene.inputs()
    whole = reconstruct_window(inputs)
    windowed = reconstruct_stream(inputs, WindowConfig(4, 1))
    assert max_gap(whole, windowed) < 1e-4 * short_scene.diameter()


def test_on_frame_callback_sees_final_frames(short_scene):
    inputs = short_scene.inputs()
    seen = {}
    seq = reconstruct_stream(inputs, WindowConfig(4, 1), on_frame=lambda t, f, p: seen.update({t: f}))
    assert sorted(seen) == list(range(inputs.num_frames))
    for t, f in seen.items():
        np.testing.assert_array_equal(f.points, seq.frames[t].points)


def test_stream_error_keeps_partial_output(short_scene):
    inputs = short_scene.inputs()

    class Broken:
        num_frames = inputs.num_frames
        intrinsics = inputs.intrinsics

        def window(self, start, stop):
            win = inputs.window(start, stop)
            if start >= 6:
                # no confident correspondences: the pose solve must fail
                win = type(win)(
                    depths=win.depths,
                    intrinsics=win.intrinsics,
                    flows=win.flows,
                    dynamic=[ConfidenceMask.ones(d.shape) for d in win.depths],
                    tracks=win.tracks,
                    references=win.references,
                    edge_threshold=win.edge_threshold,
                )
            return win

    with pytest.raises(StreamError) as info:
        reconstruct_stream(Broken(), WindowConfig(4, 1))
    # windows [0,4) and [3,7) finish; [6,10) fails
    assert info.value.window == 2
    assert len(info.value.partial) == 7
