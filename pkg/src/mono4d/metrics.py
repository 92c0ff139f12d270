"""Pointcloud-sequence and long-term 3D scene flow evaluation.

Reported distances are in millimeters and F-scores / precisions in percent;
all geometry inputs are in meters.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .align import CorrespondenceSet, umeyama_similarity
from .corr import DEFAULT_EDGE_THRESHOLD, flying_pixel_mask, sample_cloud
from .errors import InputShapeError, Mono4DError

FSCORE_THRESHOLDS_CM = (1.0, 2.5, 5.0)
FLOW_THRESHOLDS_CM = (5.0, 10.0)


@dataclass(frozen=True, eq=False)
class Trajectory3D:
    positions: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if len(visible) != len(positions):
            raise InputShapeError(f"{len(positions)} positions but {len(visible)} visibility flags")
        visible = visible & np.all(np.isfinite(positions), axis=1)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "visible", visible)


@dataclass
class MetricReport:
    cd_mm: float = None
    f1: float = None
    f2_5: float = None
    f5: float = None
    ade_mm: float = None
    fde_mm: float = None
    p5: float = None
    p10: float = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def table(self):
        """Fixed-order text table: CD, F1, F2.5, F5 then ADE, FDE, P5, P10."""
        cols = [
            ("CD(mm)", self.cd_mm),
            ("F1", self.f1),
            ("F2.5", self.f2_5),
            ("F5", self.f5),
            ("ADE(mm)", self.ade_mm),
            ("FDE(mm)", self.fde_mm),
            ("P5", self.p5),
            ("P10", self.p10),
        ]
        cols = [(name, v) for name, v in cols if v is not None]
        head = " | ".join(f"{name:>8}" for name, _ in cols)
        row = " | ".join(f"{v:8.2f}" for _, v in cols)
        return f"{head}\n{row}"


def _pairs_for_eval(pred, gt, frames, regions=None):
    src, dst = [], []
    for t in frames:
        both = pred.frames[t].valid & gt.frames[t].valid
        if regions is not None:
            both &= regions[t]
        src.append(pred.frames[t].points[both])
        dst.append(gt.frames[t].points[both])
    return CorrespondenceSet(np.concatenate(src), np.concatenate(dst))


def _check_sequences(pred, gt):
    if len(pred) != len(gt):
        raise InputShapeError(f"prediction has {len(pred)} frames, ground truth has {len(gt)}")
    if pred.frames and pred.frames[0].shape != gt.frames[0].shape:
        raise InputShapeError(
            f"prediction resolution {pred.frames[0].shape} differs from {gt.frames[0].shape}"
        )


def align_for_eval(pred, gt, mode="global", regions=None):
    """Similarity mapping the predicted sequence onto the ground truth.

    ``global`` fits over every jointly valid pixel of every frame,
    ``first-frame`` over frame 0 only. Pixels are assumed to correspond.
    """
    _check_sequences(pred, gt)
    if mode == "global":
        frames = range(len(pred))
    elif mode in ("first-frame", "first_frame"):
        frames = [0]
    else:
        raise ValueError(f"unknown alignment mode {mode!r}")
    return umeyama_similarity(_pairs_for_eval(pred, gt, frames, regions))


def _as_points(a, name):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise InputShapeError(f"{name} cloud is empty")
    return a


def nearest_distances(src, dst):
    """Distance from every src point to its nearest dst point (exact KD-tree query)."""
    d, _ = cKDTree(dst).query(src, k=1)
    return d


def chamfer_mm(pred, gt):
    """Symmetric mean nearest-neighbor distance, in millimeters."""
    pred = _as_points(pred, "predicted")
    gt = _as_points(gt, "ground-truth")
    return 1000.0 * (nearest_distances(gt, pred).mean() + nearest_distances(pred, gt).mean())


def fscore(pred, gt, delta_cm):
    """F-score (percent) at distance threshold ``delta_cm`` centimeters."""
    if not delta_cm > 0:
        raise ValueError(f"delta must be positive, got {delta_cm}")
    pred = _as_points(pred, "predicted")
    gt = _as_points(gt, "ground-truth")
    delta = delta_cm / 100.0
    precision = float(np.mean(nearest_distances(pred, gt) < delta))
    recall = float(np.mean(nearest_distances(gt, pred) < delta))
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


def evaluate_pointclouds(pred, gt, mode="global", regions=None):
    """Align, then average per-frame Chamfer and F-scores over the sequence.

    Args:
        regions: optional per-frame (H, W) booleans restricting both alignment
            and scoring (e.g. static pixels only).
    """
    sim = align_for_eval(pred, gt, mode, regions)
    aligned = pred.transformed(sim)
    cds, fs = [], {d: [] for d in FSCORE_THRESHOLDS_CM}
    for t in range(len(gt)):
        pm, gm = aligned.frames[t].valid, gt.frames[t].valid
        if regions is not None:
            pm, gm = pm & regions[t], gm & regions[t]
        p = aligned.frames[t].points[pm]
        g = gt.frames[t].points[gm]
        tree_g, tree_p = cKDTree(g), cKDTree(p)
        d_pg, _ = tree_g.query(p, k=1)
        d_gp, _ = tree_p.query(g, k=1)
        cds.append(1000.0 * (d_gp.mean() + d_pg.mean()))
        for delta in FSCORE_THRESHOLDS_CM:
            prec = np.mean(d_pg < delta / 100)
            rec = np.mean(d_gp < delta / 100)
            fs[delta].append(0.0 if prec + rec == 0 else 100.0 * 2 * prec * rec / (prec + rec))
    return MetricReport(
        cd_mm=float(np.mean(cds)),
        f1=float(np.mean(fs[1.0])),
        f2_5=float(np.mean(fs[2.5])),
        f5=float(np.mean(fs[5.0])),
    )


def recover_scene_flow(seq, tracks):
    """Lift 2D tracks to 3D by sampling each frame's cloud along the track."""
    if tracks.num_frames > len(seq):
        raise InputShapeError(
            f"tracks span {tracks.num_frames} frames but the sequence has {len(seq)}"
        )
    n, frames = tracks.num_tracks, tracks.num_frames
    positions = np.full((n, frames, 3), np.nan)
    visible = np.zeros((n, frames), dtype=bool)
    for t in range(frames):
        pts, ok = sample_cloud(seq.frames[t], tracks.positions[:, t])
        ok &= tracks.visible[:, t]
        positions[ok, t] = pts[ok]
        visible[:, t] = ok
    return [Trajectory3D(positions[k], visible[k]) for k in range(n)]


def flying_track_keep(tracks, gt_depths, rel_threshold=DEFAULT_EDGE_THRESHOLD):
    """Boolean keep-mask: query position lands on a non-flying, valid gt pixel."""
    q = tracks.query_frame
    mask = flying_pixel_mask(gt_depths[q], rel_threshold).values
    h, w = mask.shape
    pos = tracks.positions[:, q]
    col = np.floor(pos[:, 0]).astype(np.int64)
    row = np.floor(pos[:, 1]).astype(np.int64)
    inside = tracks.visible[:, q] & (col >= 0) & (col < w) & (row >= 0) & (row < h)
    keep = np.zeros(tracks.num_tracks, dtype=bool)
    keep[inside] = mask[row[inside], col[inside]] > 0
    return keep


def filter_flying_tracks(tracks, gt_depths, rel_threshold=DEFAULT_EDGE_THRESHOLD):
    """Drop tracks whose query-frame position sits on a flying pixel of the gt depth."""
    return tracks.subset(flying_track_keep(tracks, gt_depths, rel_threshold))


def flow_metrics(pred, gt, deltas_cm=FLOW_THRESHOLDS_CM):
    """ADE / FDE (mm) and per-trajectory precision P_delta (percent).

    Only timesteps visible in both trajectories count. ADE averages each
    trajectory's mean error; FDE averages the error at each trajectory's last
    jointly visible timestep; P_delta is the share of trajectories whose mean
    error is below delta centimeters.
    """
    if len(pred) != len(gt):
        raise InputShapeError(f"{len(pred)} predicted vs {len(gt)} ground-truth trajectories")
    means, finals = [], []
    for p, g in zip(pred, gt):
        both = p.visible & g.visible
        if not np.any(both):
            continue
        err = np.linalg.norm(p.positions[both] - g.positions[both], axis=1)
        means.append(math.fsum(err) / len(err))
        finals.append(err[-1])
    if not means:
        raise InputShapeError("no trajectory has a jointly visible timestep")
    means = np.asarray(means)
    out = {
        "ade_mm": 1000.0 * math.fsum(means) / len(means),
        "fde_mm": 1000.0 * math.fsum(finals) / len(finals),
    }
    for delta in deltas_cm:
        out[f"p{delta:g}".replace(".", "_")] = 100.0 * float(np.mean(means < delta / 100.0))
    return out


def evaluate_scene_flow(pred, gt, tracks, gt_depths=None, rel_threshold=DEFAULT_EDGE_THRESHOLD):
    """Full flow protocol: filter flying tracks, align on frame 0, lift, score."""
    _check_sequences(pred, gt)
    if gt_depths is not None:
        tracks = filter_flying_tracks(tracks, gt_depths, rel_threshold)
    sim = align_for_eval(pred, gt, "first-frame")
    aligned = pred.transformed(sim)
    m = flow_metrics(recover_scene_flow(aligned, tracks), recover_scene_flow(gt, tracks))
    return MetricReport(ade_mm=m["ade_mm"], fde_mm=m["fde_mm"], p5=m["p5"], p10=m["p10"])


def trajectory_ate(pred_poses, gt_poses):
    """RMS camera-center error after similarity alignment of the two trajectories."""
    if len(pred_poses) != len(gt_poses):
        raise InputShapeError(f"{len(pred_poses)} predicted vs {len(gt_poses)} ground-truth poses")
    src = np.array([p.translation for p in pred_poses])
    dst = np.array([p.translation for p in gt_poses])
    if len(src) < 3:
        diff = src - src[0] - (dst - dst[0])
        return float(np.sqrt(np.mean(np.sum(diff**2, axis=1))))
    try:
        sim = umeyama_similarity(CorrespondenceSet(src, dst))
        diff = sim.apply(src) - dst
    except Mono4DError:
        # collinear or static centers: fall back to anchoring at the first camera
        diff = src - src[0] - (dst - dst[0])
    return float(np.sqrt(np.mean(np.sum(diff**2, axis=1))))
