"""Closed-form rigid and similarity alignment of weighted 3D correspondences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PoseSE3, SimTransform
from .errors import DegeneracyError, DegenerateInputError, InputShapeError

# second singular value of the cross-covariance must exceed this times the first
RANK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Paired points ``src[k] <-> dst[k]`` with non-negative weights."""

    src: np.ndarray
    dst: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.float64).reshape(-1, 3)
        dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 3)
        if src.shape != dst.shape:
            raise InputShapeError(f"src has {len(src)} points, dst has {len(dst)}")
        if self.weights is None:
            weights = np.ones(len(src))
        else:
            weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if weights.shape != (len(src),):
            raise InputShapeError(f"{len(weights)} weights for {len(src)} correspondences")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ValueError("weights must be finite and non-negative")
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        object.__setattr__(self, "weights", weights)

    def __len__(self):
        return len(self.src)

    @classmethod
    def from_clouds(cls, src_cloud, dst_cloud, weights=None):
        """Pixelwise pairs between two equally sized FrameClouds.

        Only jointly valid pixels are kept; ``weights`` is an optional (H, W) grid.
        """
        if src_cloud.shape != dst_cloud.shape:
            raise InputShapeError(f"cloud shapes differ: {src_cloud.shape} vs {dst_cloud.shape}")
        both = src_cloud.valid & dst_cloud.valid
        w = None if weights is None else np.asarray(weights, dtype=np.float64)[both]
        return cls(src_cloud.points[both], dst_cloud.points[both], w)


def _active(c):
    keep = c.weights > 0
    n = int(keep.sum())
    if n < 3:
        raise DegenerateInputError(f"need at least 3 correspondences with positive weight, got {n}")
    src, dst, w = c.src[keep], c.dst[keep], c.weights[keep]
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise ValueError("correspondence coordinates must be finite where weight > 0")
    return src, dst, w


def _deficient_axis(centered, w):
    cov = (centered * w[:, None]).T @ centered
    vals, vecs = np.linalg.eigh(cov)
    return vecs[:, 0]


def _cross_covariance(src, dst, w):
    wsum = w.sum()
    mu_src = (w @ src) / wsum
    mu_dst = (w @ dst) / wsum
    src_c = src - mu_src
    dst_c = dst - mu_dst
    cov = (dst_c * w[:, None]).T @ src_c / wsum
    return cov, mu_src, mu_dst, src_c, wsum


def _orthogonal_factor(cov, src_c, w):
    u, s, vt = np.linalg.svd(cov)
    if not s[1] > RANK_TOL * s[0]:
        axis = _deficient_axis(src_c, w)
        raise DegeneracyError(
            "rank-deficient correspondences (collinear or coincident points); "
            f"no spread along axis ({axis[0]:+.3f}, {axis[1]:+.3f}, {axis[2]:+.3f})",
            axis=axis,
        )
    d = np.ones(3)
    d[2] = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag(d) @ vt, s, d


def weighted_procrustes(c):
    """Rigid pose minimizing ``sum_k w_k |dst_k - (R src_k + t)|^2``.

    Args:
        c: CorrespondenceSet with at least three positively weighted pairs
            that are not collinear.

    Returns:
        PoseSE3 mapping src coordinates onto dst coordinates.
    """
    src, dst, w = _active(c)
    cov, mu_src, mu_dst, src_c, _ = _cross_covariance(src, dst, w)
    rot, _, _ = _orthogonal_factor(cov, src_c, w)
    return PoseSE3(rot, mu_dst - rot @ mu_src, check=False)


def umeyama_similarity(c, with_scale=True):
    """Similarity (s, R, T) minimizing ``sum_k w_k |dst_k - (s R src_k + T)|^2``.

    With ``with_scale=False`` the scale is fixed to 1 and the result equals
    :func:`weighted_procrustes`.
    """
    src, dst, w = _active(c)
    cov, mu_src, mu_dst, src_c, wsum = _cross_covariance(src, dst, w)
    var_src = float(w @ np.einsum("ij,ij->i", src_c, src_c)) / wsum
    if not var_src > 0:
        raise DegeneracyError("source points have zero variance")
    rot, s, d = _orthogonal_factor(cov, src_c, w)
    scale = float(s @ d) / var_src if with_scale else 1.0
    return SimTransform(scale, rot, mu_dst - scale * rot @ mu_src)


def alignment_residual(c, transform):
    """Weighted sum of squared residuals of ``dst - transform(src)``."""
    diff = c.dst - transform.apply(c.src)
    keep = c.weights > 0
    return float(c.weights[keep] @ np.einsum("ij,ij->i", diff[keep], diff[keep]))


def principal_scale(points, weights=None):
    """Standard deviation of a point set along its first principal axis.

    This is the square root of the largest eigenvalue of the (population)
    covariance, so it does not grow with the number of points.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < 2:
        raise DegeneracyError(f"principal scale needs at least 2 points, got {len(points)}")
    if weights is None:
        mean = points.mean(axis=0)
        centered = points - mean
        cov = centered.T @ centered / len(points)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        wsum = weights.sum()
        mean = (weights @ points) / wsum
        centered = points - mean
        cov = (centered * weights[:, None]).T @ centered / wsum
    top = np.linalg.eigvalsh(cov)[-1]
    if not top > 0:
        raise DegeneracyError("all points coincide; principal scale is zero")
    return float(np.sqrt(top))


def principal_axis(points):
    """(scale, unit first principal axis) of an (N, 3) point set."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < 2:
        raise DegeneracyError(f"principal scale needs at least 2 points, got {len(points)}")
    centered = points - points.mean(axis=0)
    vals, vecs = np.linalg.eigh(centered.T @ centered / len(points))
    if not vals[-1] > 0:
        raise DegeneracyError("all points coincide; principal scale is zero")
    return float(np.sqrt(vals[-1])), vecs[:, -1]
