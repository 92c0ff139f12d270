"""Sliding-window reconstruction of arbitrarily long videos.

Each window of ``N_w`` frames is reconstructed on its own (unproject, solve
poses, assemble), then aligned onto the frames already emitted through a
similarity fitted on the ``N_o`` frames the two windows share.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .align import CorrespondenceSet, umeyama_similarity
from .core import CloudSequence, FrameCloud, assemble_global
from .errors import DegeneracyError, DegenerateInputError, Mono4DError, StitchError, StreamError
from .refine import solve_window_poses


@dataclass(frozen=True)
class WindowConfig:
    window: int = 4
    overlap: int = 1

    def __post_init__(self):
        if self.window < 2:
            raise ValueError(f"window size must be >= 2, got {self.window}")
        if not 1 <= self.overlap < self.window:
            raise ValueError(
                f"overlap must satisfy 1 <= overlap < window ({self.window}), got {self.overlap}"
            )

    @property
    def stride(self):
        return self.window - self.overlap


def window_bounds(num_frames, cfg):
    """[start, stop) of every window; the last may be shorter than ``cfg.window``."""
    if num_frames < 2:
        raise ValueError(f"need at least 2 frames, got {num_frames}")
    bounds = []
    start = 0
    while True:
        stop = min(start + cfg.window, num_frames)
        bounds.append((start, stop))
        if stop == num_frames:
            return bounds
        start += cfg.stride


def reconstruct_window(inputs):
    """CloudSequence of one window, in the coordinates of its first frame."""
    if inputs.num_frames < 2:
        raise ValueError(f"a window needs at least 2 frames, got {inputs.num_frames}")
    clouds = inputs.clouds()
    poses = solve_window_poses(clouds, inputs.flows, inputs.pair_masks())
    return assemble_global(clouds, poses, inputs.intrinsics)


def overlap_transform(prev_frames, next_frames, window=None):
    """Similarity taking ``next_frames`` onto the pixel-aligned ``prev_frames``."""
    src, dst = [], []
    for p, n in zip(prev_frames, next_frames):
        both = p.valid & n.valid
        src.append(n.points[both])
        dst.append(p.points[both])
    try:
        return umeyama_similarity(CorrespondenceSet(np.concatenate(src), np.concatenate(dst)))
    except (DegeneracyError, DegenerateInputError) as exc:
        raise StitchError(window, exc) from exc


def stitch(prev, next_seq, overlap, window=None):
    """Append ``next_seq`` to ``prev`` after aligning their ``overlap`` shared frames.

    The last ``overlap`` frames of ``prev`` and the first ``overlap`` frames of
    ``next_seq`` show the same images. ``prev`` is returned unchanged as the
    prefix of the result.

    Returns:
        (CloudSequence, SimTransform) with the transform mapping ``next_seq``
        coordinates into ``prev``'s.
    """
    if not 1 <= overlap <= min(len(prev), len(next_seq)):
        raise ValueError(
            f"overlap {overlap} must be between 1 and the shorter sequence "
            f"({len(prev)}, {len(next_seq)})"
        )
    sim = overlap_transform(prev.frames[-overlap:], next_seq.frames[:overlap], window)
    frames = list(prev.frames)
    poses = list(prev.poses)
    for f, p in zip(next_seq.frames[overlap:], next_seq.poses[overlap:]):
        points = sim.apply(f.points)
        points[~f.valid] = np.nan
        frames.append(FrameCloud(points, f.valid))
        poses.append(sim.apply_to_pose(p))
    return CloudSequence(frames, poses, prev.intrinsics), sim


def iter_stream(source, cfg=None):
    """Yield ``(t, FrameCloud, pose)`` in frame order as each frame becomes final.

    Args:
        source: anything with ``num_frames`` and ``window(start, stop)``
            returning SceneInputs (e.g. SceneInputs itself or a lazy manifest
            reader). Only the current window and the previous window's
            overlap frames are held in memory.
        cfg: WindowConfig.

    Raises:
        StreamError: carrying the index of the failing window.
    """
    cfg = WindowConfig() if cfg is None else cfg
    bounds = window_bounds(source.num_frames, cfg)
    tail = None
    for w, (start, stop) in enumerate(bounds):
        try:
            local = reconstruct_window(source.window(start, stop))
            if tail is None:
                placed = local
                first = 0
            else:
                placed, _ = stitch(tail, local, len(tail), window=w)
                placed = CloudSequence(
                    placed.frames[len(tail):], placed.poses[len(tail):], placed.intrinsics
                )
                first = len(tail)
        except Mono4DError as exc:
            if isinstance(exc, StreamError):
                raise
            raise StreamError(w, exc) from exc
        for k, (f, p) in enumerate(zip(placed.frames, placed.poses)):
            yield start + first + k, f, p
        # the shared frames of the next window are the last `overlap` ones here
        n = min(cfg.overlap, stop - start)
        if tail is None:
            tail = CloudSequence(placed.frames[-n:], placed.poses[-n:], placed.intrinsics)
        else:
            kept = list(tail.frames) + list(placed.frames)
            kept_poses = list(tail.poses) + list(placed.poses)
            tail = CloudSequence(kept[-n:], kept_poses[-n:], placed.intrinsics)


def reconstruct_stream(source, cfg=None, on_frame=None):
    """Whole-sequence reconstruction by sliding windows.

    Args:
        on_frame: optional callable ``(t, FrameCloud, pose)`` invoked as soon
            as each frame is final (e.g. to write it out).

    Raises:
        StreamError: with ``partial`` holding every frame emitted before the
            failing window.
    """
    frames, poses = [], []
    intr = source.intrinsics
    try:
        for t, f, p in iter_stream(source, cfg):
            frames.append(f)
            poses.append(p)
            if on_frame is not None:
                on_frame(t, f, p)
    except StreamError as exc:
        exc.partial = CloudSequence(frames, poses, intr) if frames else None
        raise
    return CloudSequence(frames, poses, intr)
