"""Dense correspondences: flow warping, bilinear sampling and pseudo-confidence masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import FrameCloud
from .errors import InputShapeError

DEFAULT_EDGE_THRESHOLD = 0.05

_NEIGHBORS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass(frozen=True, eq=False)
class FlowField:
    """Displacements taking frame i-1 pixel centers to their positions in frame i."""

    du: np.ndarray
    dv: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        du = np.asarray(self.du, dtype=np.float64)
        dv = np.asarray(self.dv, dtype=np.float64)
        if du.ndim != 2 or du.shape != dv.shape:
            raise InputShapeError(f"flow components have shapes {du.shape} and {dv.shape}")
        valid = np.ones(du.shape, bool) if self.valid is None else np.asarray(self.valid, bool)
        if valid.shape != du.shape:
            raise InputShapeError(f"flow validity {valid.shape} does not match {du.shape}")
        valid = valid & np.isfinite(du) & np.isfinite(dv)
        object.__setattr__(self, "du", du)
        object.__setattr__(self, "dv", dv)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self):
        return self.du.shape

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))

    def targets(self):
        """(H, W, 2) positions in the later frame that each pixel center moves to."""
        h, w = self.shape
        x, y = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
        return np.stack([x + self.du, y + self.dv], axis=-1)


@dataclass(frozen=True, eq=False)
class ConfidenceMask:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise InputShapeError(f"mask must be a 2D grid, got {values.shape}")
        if not np.all((values >= 0) & (values <= 1)):
            raise ValueError("confidence values must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def ones(cls, shape):
        return cls(np.ones(shape))

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape))


@dataclass(frozen=True, eq=False)
class TrackSet:
    """Long-term 2D tracks: ``positions[n, t] = (x, y)`` of track n in frame t."""

    positions: np.ndarray
    visible: np.ndarray
    query_frame: int = 0

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64)
        visible = np.asarray(self.visible, dtype=bool)
        if positions.ndim != 3 or positions.shape[2] != 2 or visible.shape != positions.shape[:2]:
            raise InputShapeError(
                f"tracks need (N, T, 2) positions and (N, T) visibility, got "
                f"{positions.shape} and {visible.shape}"
            )
        if not 0 <= self.query_frame < max(positions.shape[1], 1):
            raise ValueError(f"query frame {self.query_frame} outside {positions.shape[1]} frames")
        if not np.all(np.isfinite(positions[visible])):
            raise ValueError("track positions must be finite where visible")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "visible", visible)

    @property
    def num_tracks(self):
        return self.positions.shape[0]

    @property
    def num_frames(self):
        return self.positions.shape[1]

    def subset(self, keep):
        return TrackSet(self.positions[keep], self.visible[keep], self.query_frame)

    def frames(self, start, stop):
        """Tracks restricted to frames [start, stop), re-queried at ``start``."""
        return TrackSet(self.positions[:, start:stop], self.visible[:, start:stop], 0)


class BilinearSampler:
    """Precomputed bilinear lookup of a (H, W) grid at continuous positions.

    Positions use pixel-center coordinates, so the sample domain is
    ``[0.5, W - 0.5] x [0.5, H - 0.5]``. Weights and indices do not depend
    on the sampled values and can be reused across many grids.
    """

    def __init__(self, positions, shape):
        h, w = shape
        positions = np.asarray(positions, dtype=np.float64)
        self.out_shape = positions.shape[:-1]
        pos = positions.reshape(-1, 2)
        u = pos[:, 0] - 0.5
        v = pos[:, 1] - 0.5
        with np.errstate(invalid="ignore"):
            inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
        u = np.where(inside, u, 0.0)
        v = np.where(inside, v, 0.0)
        x0 = np.minimum(np.floor(u), max(w - 2, 0)).astype(np.int64)
        y0 = np.minimum(np.floor(v), max(h - 2, 0)).astype(np.int64)
        fx = u - x0
        fy = v - y0
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        self.index = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=1)
        self.weights = np.stack(
            [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1
        )
        self.inside = inside
        self.shape = (h, w)

    def valid(self, grid_valid):
        """Inside the domain with every positively weighted corner valid."""
        corner_ok = grid_valid.reshape(-1)[self.index] | (self.weights == 0)
        ok = self.inside & corner_ok.all(axis=1)
        return ok.reshape(self.out_shape)

    def sample(self, grid, grid_valid=None):
        """Interpolate an (H, W) or (H, W, C) grid; invalid entries count as zero."""
        flat = grid.reshape(self.shape[0] * self.shape[1], -1)
        if grid_valid is not None:
            flat = np.where(grid_valid.reshape(-1, 1), flat, 0.0)
        out = np.einsum("nk,nkc->nc", self.weights, flat[self.index])
        return out.reshape(self.out_shape + grid.shape[2:])


def _check_same(a, b, what):
    if tuple(a) != tuple(b):
        raise InputShapeError(f"{what}: resolutions differ ({a} vs {b})")


def warp_cloud(target, flow):
    """Pull ``target`` back onto the source grid of ``flow``.

    Output pixel (i, j) holds ``target`` bilinearly sampled at the pixel center
    displaced by the flow. It is invalid where the flow is invalid, the
    displaced position falls outside the sample domain, or a contributing
    corner of ``target`` is invalid.
    """
    _check_same(target.shape, flow.shape, "warp_cloud")
    sampler = BilinearSampler(flow.targets(), flow.shape)
    valid = flow.valid & sampler.valid(target.valid)
    points = sampler.sample(target.points, target.valid)
    points[~valid] = np.nan
    return FrameCloud(points, valid)


def sample_cloud(cloud, pts):
    """Bilinear samples of a cloud at (N, 2) positions.

    Returns:
        (points, valid): an (N, 3) array (NaN where invalid) and (N,) booleans.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    sampler = BilinearSampler(pts, cloud.shape)
    valid = sampler.valid(cloud.valid)
    points = sampler.sample(cloud.points, cloud.valid)
    points[~valid] = np.nan
    return points, valid


def sample_confidence(mask, positions):
    """Bilinear confidence at continuous positions.

    A sample whose positively weighted corners include a zero-confidence pixel
    gets zero, as does any sample outside the image.
    """
    sampler = BilinearSampler(positions, mask.shape)
    ok = sampler.valid(mask.values > 0)
    return np.where(ok, sampler.sample(mask.values), 0.0)


def flying_pixel_mask(depth, rel_threshold=DEFAULT_EDGE_THRESHOLD):
    """Zero out pixels whose depth jumps relative to any 8-neighbor.

    The relative jump between neighbors a and b is ``|a - b| / min(a, b)``;
    invalid neighbors and out-of-image neighbors are ignored. Invalid pixels
    get confidence 0.
    """
    if not rel_threshold > 0:
        raise ValueError(f"rel_threshold must be positive, got {rel_threshold}")
    d = np.where(depth.valid, depth.values, np.nan)
    h, w = d.shape
    padded = np.full((h + 2, w + 2), np.nan)
    padded[1:-1, 1:-1] = d
    flying = np.zeros((h, w), dtype=bool)
    with np.errstate(invalid="ignore"):
        for dy, dx in _NEIGHBORS:
            nb = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
            rel = np.abs(d - nb) / np.minimum(d, nb)
            flying |= rel > rel_threshold
    return ConfidenceMask(np.where(depth.valid & ~flying, 1.0, 0.0))


def compose_pseudo_mask(dynamic, edges, flow_valid):
    """Pointwise ``(1 - dynamic) * edges * flow_valid``.

    ``dynamic`` follows the convention 1 = moving (hands, held objects).
    """
    flow_valid = np.asarray(flow_valid, dtype=bool)
    _check_same(dynamic.shape, edges.shape, "compose_pseudo_mask")
    _check_same(dynamic.shape, flow_valid.shape, "compose_pseudo_mask")
    return ConfidenceMask((1.0 - dynamic.values) * edges.values * flow_valid)


def frame_confidence(depth, dynamic=None, rel_threshold=DEFAULT_EDGE_THRESHOLD):
    """Per-frame pseudo confidence: static and away from depth edges."""
    edges = flying_pixel_mask(depth, rel_threshold)
    if dynamic is None:
        return edges
    _check_same(dynamic.shape, edges.shape, "frame_confidence")
    return ConfidenceMask((1.0 - dynamic.values) * edges.values)


def flow_pair_mask(dynamic, edges, flow, later_confidence):
    """Confidence of each flow correspondence, on the earlier frame's grid.

    Combines the earlier frame's pseudo mask with the later frame's per-frame
    confidence sampled where the flow lands.
    """
    base = compose_pseudo_mask(dynamic, edges, flow.valid)
    landing = sample_confidence(later_confidence, flow.targets())
    return ConfidenceMask(base.values * landing)
