"""In-memory bundle of one video's geometry-level inputs."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .core import unproject
from .corr import DEFAULT_EDGE_THRESHOLD, ConfidenceMask, flow_pair_mask, flying_pixel_mask
from .errors import InputShapeError


@dataclass(frozen=True, eq=False)
class SceneInputs:
    """Depths, one intrinsics record, adjacent-frame flows and masks.

    ``flows[k]`` maps frame k to frame k+1. ``dynamic`` masks use
    1 = moving. ``references`` are optional reference depth maps used by the
    shape regularizer and as the source of pseudo edges.
    """

    depths: list
    intrinsics: object
    flows: list
    dynamic: list = None
    tracks: object = None
    references: list = None
    edge_threshold: float = DEFAULT_EDGE_THRESHOLD

    def __post_init__(self):
        t = len(self.depths)
        if len(self.flows) != max(t - 1, 0):
            raise InputShapeError(f"{t} frames need {max(t - 1, 0)} flows, got {len(self.flows)}")
        if self.dynamic is None:
            object.__setattr__(
                self, "dynamic", [ConfidenceMask.zeros(self.intrinsics.shape) for _ in range(t)]
            )
        if len(self.dynamic) != t:
            raise InputShapeError(f"{t} frames but {len(self.dynamic)} dynamic masks")
        if self.references is not None and len(self.references) != t:
            raise InputShapeError(f"{t} frames but {len(self.references)} reference depths")
        if self.tracks is not None and self.tracks.num_frames != t:
            raise InputShapeError(f"{t} frames but tracks span {self.tracks.num_frames}")
        shape = self.intrinsics.shape
        rasters = list(self.depths) + list(self.flows) + list(self.dynamic)
        rasters += list(self.references or [])
        for r in rasters:
            if tuple(r.shape) != shape:
                raise InputShapeError(f"raster {r.shape} does not match intrinsics {shape}")

    @property
    def num_frames(self):
        return len(self.depths)

    def window(self, start, stop):
        """Inputs for frames [start, stop); tracks are re-queried at ``start``."""
        return SceneInputs(
            depths=self.depths[start:stop],
            intrinsics=self.intrinsics,
            flows=self.flows[start : stop - 1],
            dynamic=self.dynamic[start:stop],
            tracks=None if self.tracks is None else self.tracks.frames(start, stop),
            references=None if self.references is None else self.references[start:stop],
            edge_threshold=self.edge_threshold,
        )

    def with_depths(self, depths):
        return replace(self, depths=list(depths))

    def scaled(self, factor):
        """Copy with all input (not reference) depths multiplied by ``factor``."""
        return self.with_depths([d.scaled(factor) for d in self.depths])

    def clouds(self, intrinsics=None):
        intr = self.intrinsics if intrinsics is None else intrinsics
        return [unproject(d, intr) for d in self.depths]

    def edge_masks(self):
        """Flying-pixel masks, from the reference depths when available."""
        source = self.references if self.references is not None else self.depths
        return [flying_pixel_mask(d, self.edge_threshold) for d in source]

    def frame_masks(self, edges=None):
        edges = self.edge_masks() if edges is None else edges
        return [
            ConfidenceMask((1.0 - dyn.values) * e.values) for dyn, e in zip(self.dynamic, edges)
        ]

    def pair_masks(self, edges=None):
        """Confidence of each adjacent-frame flow correspondence (frame k grid)."""
        edges = self.edge_masks() if edges is None else edges
        frame = self.frame_masks(edges)
        return [
            flow_pair_mask(self.dynamic[k], edges[k], self.flows[k], frame[k + 1])
            for k in range(len(self.flows))
        ]
