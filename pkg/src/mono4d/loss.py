"""Self-supervised reconstruction objectives and their weighted total.

The 3D correspondence losses compare a point in frame i with its flow- or
track-matched point in frame j carried over by the relative camera pose, and
normalize by the principal scale of frame j so that the value does not depend
on the global scale of the reconstruction.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .align import CorrespondenceSet, principal_scale, umeyama_similarity
from .core import compose, invert
from .corr import FlowField, sample_cloud, sample_confidence, warp_cloud
from .errors import DegeneracyError, InputShapeError, InsufficientSupportError, NonFiniteLossError

BCE_EPS = 1e-7
MIN_SUPPORT = 3

TERMS = ("shape", "flow", "track", "mask", "consistency")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 4.0
    beta: float = 5.0
    gamma: float = 5.0
    lam: float = 1.0
    mu: float = 0.005

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {value}")

    def as_tuple(self):
        """Weights in term order: shape, flow, track, mask, consistency."""
        return (self.alpha, self.beta, self.gamma, self.lam, self.mu)


@dataclass
class LossReport:
    shape: float
    flow: float
    track: float
    mask: float
    consistency: float
    total: float
    counts: dict = field(default_factory=dict)

    def terms(self):
        return (self.shape, self.flow, self.track, self.mask, self.consistency)

    def recompute_total(self, weights):
        return math.fsum(w * v for w, v in zip(weights.as_tuple(), self.terms()))

    def to_dict(self):
        out = {name: float(v) for name, v in zip(TERMS, self.terms())}
        out["total"] = float(self.total)
        for key in sorted(self.counts):
            out[f"count_{key}"] = int(self.counts[key])
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


@dataclass(frozen=True)
class TrackCorrespondence:
    """Sparse matches: ``positions_i[n]`` in frame i sees the same point as ``positions_j[n]``."""

    positions_i: np.ndarray
    positions_j: np.ndarray


def _weighted_mean_distance(residual, weights):
    keep = weights > 0
    n = int(keep.sum())
    if n < MIN_SUPPORT:
        raise InsufficientSupportError(
            f"{n} positively weighted correspondences; need at least {MIN_SUPPORT}"
        )
    d = np.linalg.norm(residual[keep], axis=1)
    w = weights[keep]
    return math.fsum(w * d) / math.fsum(w), n


def _matched_points(cloud_i, cloud_j, correspondence, mask):
    """(src_i, matched_j, weights) for a dense flow or sparse track correspondence."""
    if isinstance(correspondence, FlowField):
        if cloud_i.shape != correspondence.shape or cloud_j.shape != correspondence.shape:
            raise InputShapeError("clouds and flow must share one resolution")
        warped = warp_cloud(cloud_j, correspondence)
        weights = np.asarray(getattr(mask, "values", mask), dtype=np.float64)
        if weights.shape != cloud_i.shape:
            raise InputShapeError(f"mask {weights.shape} does not match clouds {cloud_i.shape}")
        ok = cloud_i.valid & warped.valid
        return cloud_i.points[ok], warped.points[ok], weights[ok]
    a, ok_a = sample_cloud(cloud_i, correspondence.positions_i)
    b, ok_b = sample_cloud(cloud_j, correspondence.positions_j)
    weights = np.asarray(getattr(mask, "values", mask), dtype=np.float64).reshape(-1)
    if weights.shape != (len(a),):
        raise InputShapeError(f"{weights.size} track weights for {len(a)} tracks")
    ok = ok_a & ok_b
    return a[ok], b[ok], weights[ok]


def photometric_parts(cloud_i, cloud_j, correspondence, mask, pose_ji):
    """Numerator pieces of the 3D correspondence loss.

    Returns:
        (mean_distance, scale_j, count): the mask-weighted mean residual
        distance, the principal scale of frame j and the number of
        correspondences with positive weight.
    """
    a, b, w = _matched_points(cloud_i, cloud_j, correspondence, mask)
    mean, n = _weighted_mean_distance(a - pose_ji.apply(b), w)
    try:
        scale = principal_scale(cloud_j.valid_points())
    except DegeneracyError as exc:
        raise DegeneracyError(f"frame j cloud has no spread: {exc}") from exc
    return mean, scale, n


def photometric_3d_loss(cloud_i, cloud_j, correspondence, mask, pose_ji):
    """Scale-normalized 3D reprojection error between two frames.

    Args:
        cloud_i: FrameCloud of the earlier (reference) frame.
        cloud_j: FrameCloud of the matched frame.
        correspondence: FlowField from frame i to frame j, or a
            TrackCorrespondence.
        mask: per-correspondence confidence; an (H, W) mask on frame i's grid
            for flow, an (N,) array for tracks.
        pose_ji: rigid transform from frame j camera coordinates to frame i.

    Returns:
        Weighted mean of ``|X_i - P_ji X_j|`` divided by the principal scale
        of ``cloud_j``.
    """
    mean, scale, _ = photometric_parts(cloud_i, cloud_j, correspondence, mask, pose_ji)
    return mean / scale


def relative_pose(poses, i, j):
    """Pose taking frame-j camera coordinates into frame i, from camera-to-world poses."""
    return compose(invert(poses[i]), poses[j])


def flow_loss(clouds, poses, flows, pair_masks):
    """Mean photometric loss over adjacent pairs (k, k+1).

    Returns:
        (loss, count) with count the total number of correspondences used.
    """
    if len(flows) != len(clouds) - 1 or len(pair_masks) != len(flows):
        raise InputShapeError(
            f"{len(clouds)} clouds need {len(clouds) - 1} flows and masks, got "
            f"{len(flows)} and {len(pair_masks)}"
        )
    values, count = [], 0
    for k, flow in enumerate(flows):
        mean, scale, n = photometric_parts(
            clouds[k], clouds[k + 1], flow, pair_masks[k], relative_pose(poses, k, k + 1)
        )
        values.append(mean / scale)
        count += n
    return (math.fsum(values) / len(values) if values else 0.0), count


def track_weights(tracks, frame_masks, t, query=0):
    """Confidence of each track between the query frame and frame t."""
    wq = sample_confidence(frame_masks[query], tracks.positions[:, query])
    wt = sample_confidence(frame_masks[t], tracks.positions[:, t])
    vis = tracks.visible[:, query] & tracks.visible[:, t]
    return np.where(vis, wq * wt, 0.0)


def track_loss(clouds, poses, tracks, frame_masks):
    """Mean photometric loss over (query, t) track pairs for every other frame t."""
    q = tracks.query_frame
    values, count = [], 0
    for t in range(tracks.num_frames):
        if t == q:
            continue
        corr = TrackCorrespondence(tracks.positions[:, q], tracks.positions[:, t])
        w = track_weights(tracks, frame_masks, t, q)
        mean, scale, n = photometric_parts(clouds[q], clouds[t], corr, w, relative_pose(poses, q, t))
        values.append(mean / scale)
        count += n
    return (math.fsum(values) / len(values) if values else 0.0), count


def shape_loss(cloud, reference):
    """Mean distance between a cloud and a reference after best similarity alignment.

    The similarity maps ``cloud`` onto ``reference`` and is fitted over jointly
    valid pixels; the result is in the reference's units.
    """
    if cloud.shape != reference.shape:
        raise InputShapeError(f"cloud {cloud.shape} and reference {reference.shape} differ")
    pairs = CorrespondenceSet.from_clouds(cloud, reference)
    if len(pairs) < MIN_SUPPORT:
        raise InsufficientSupportError(f"{len(pairs)} jointly valid pixels; need {MIN_SUPPORT}")
    sim = umeyama_similarity(pairs)
    d = np.linalg.norm(sim.apply(pairs.src) - pairs.dst, axis=1)
    return math.fsum(d) / len(d)


def mask_bce_loss(predicted, pseudo):
    """Mean binary cross-entropy of predicted confidences against pseudo labels."""
    p = np.asarray(getattr(predicted, "values", predicted), dtype=np.float64)
    q = np.asarray(getattr(pseudo, "values", pseudo), dtype=np.float64)
    if p.shape != q.shape:
        raise InputShapeError(f"mask shapes differ: {p.shape} vs {q.shape}")
    p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    bce = -(q * np.log(p) + (1.0 - q) * np.log1p(-p))
    return math.fsum(bce.ravel()) / bce.size


def intrinsic_consistency_loss(k1, k2):
    """Frobenius norm of the difference of two intrinsics matrices."""
    if k1.shape != k2.shape:
        raise InputShapeError(f"intrinsics describe different image sizes: {k1.shape} vs {k2.shape}")
    return float(np.linalg.norm(k1.matrix - k2.matrix))


def total_loss(shape, flow, track, mask, consistency, weights=None, counts=None):
    """Weighted sum of the five terms, as a LossReport."""
    weights = LossWeights() if weights is None else weights
    values = (shape, flow, track, mask, consistency)
    for name, value in zip(TERMS, values):
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
    total = math.fsum(w * float(v) for w, v in zip(weights.as_tuple(), values))
    return LossReport(*map(float, values), total=total, counts=dict(counts or {}))


def sequence_losses(clouds, poses, flows, pair_masks, frame_masks, tracks=None,
                    references=None, weights=None):
    """LossReport of a reconstructed window given its poses and masks.

    The predicted confidence is taken to be the pseudo mask itself, and one
    intrinsics record is shared by all frames, so the consistency term is 0.
    """
    flow, n_flow = flow_loss(clouds, poses, flows, pair_masks) if flows else (0.0, 0)
    track, n_track = (0.0, 0)
    if tracks is not None and tracks.num_frames > 1:
        track, n_track = track_loss(clouds, poses, tracks, frame_masks)
    shape, n_shape = 0.0, 0
    if references is not None:
        values = []
        for cloud, ref in zip(clouds, references):
            values.append(shape_loss(cloud, ref))
            n_shape += int(np.sum(cloud.valid & ref.valid))
        shape = math.fsum(values) / len(values)
    mask = math.fsum(mask_bce_loss(m, m) for m in frame_masks) / len(frame_masks)
    counts = {"flow": n_flow, "track": n_track, "shape": n_shape}
    return total_loss(shape, flow, track, mask, 0.0, weights, counts)

