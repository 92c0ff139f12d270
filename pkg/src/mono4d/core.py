"""Domain types, pinhole unprojection and rigid-pose algebra.

Pixel (row i, col j) has its center at continuous image coordinates
``(x, y) = (j + 0.5, i + 0.5)``. All 2D positions in this package use that
``(x, y)`` order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputShapeError

ORTHO_TOL = 1e-9
RENORMALIZE_EVERY = 64


def _as_rotation(rotation):
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3):
        raise InputShapeError(f"rotation must be 3x3, got {rotation.shape}")
    return rotation


def _check_rotation(rotation):
    ortho = np.linalg.norm(rotation.T @ rotation - np.eye(3))
    if not ortho <= ORTHO_TOL:
        raise ValueError(f"rotation is not orthonormal (|R^T R - I| = {ortho:.3g})")
    det = np.linalg.det(rotation)
    if not abs(det - 1.0) <= ORTHO_TOL:
        raise ValueError(f"rotation determinant is {det!r}, expected +1")


def project_to_rotation(matrix):
    """Nearest rotation (polar factor) of a 3x3 matrix."""
    u, _, vt = np.linalg.svd(matrix)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def matrix(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled_focal(self, factor):
        """Copy with both focal lengths multiplied by ``factor``."""
        return CameraIntrinsics(
            self.fx * factor, self.fy * factor, self.cx, self.cy, self.width, self.height
        )

    def pixel_grid(self):
        """(H, W) arrays of pixel-center x and y coordinates."""
        xs = np.arange(self.width, dtype=np.float64) + 0.5
        ys = np.arange(self.height, dtype=np.float64) + 0.5
        return np.meshgrid(xs, ys)

    def rays(self):
        """(H, W, 3) array of K^-1 h(p) for every pixel center (unit z)."""
        x, y = self.pixel_grid()
        return np.stack(
            [(x - self.cx) / self.fx, (y - self.cy) / self.fy, np.ones_like(x)], axis=-1
        )

    def to_dict(self):
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid camera-to-world transform ``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        rotation = _as_rotation(self.rotation)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.check:
            _check_rotation(rotation)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, matrix, check=True):
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3], check=check)

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        """Transform an (..., 3) array of points."""
        return points @ self.rotation.T + self.translation

    def __matmul__(self, other):
        return compose(self, other)


@dataclass(frozen=True, eq=False)
class SimTransform:
    """Scaled rigid transform ``x -> scale * rotation @ x + translation``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        rotation = _as_rotation(self.rotation)
        _check_rotation(rotation)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3)
        )

    @classmethod
    def identity(cls):
        return cls()

    def apply(self, points):
        return self.scale * (points @ self.rotation.T) + self.translation

    def inverse(self):
        rt = self.rotation.T
        return SimTransform(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)

    def apply_to_pose(self, pose):
        """Camera pose after mapping the world through this transform.

        The returned pose is rigid; the camera center is mapped exactly and
        the orientation is rotated, the scale only affects the position.
        """
        return PoseSE3(
            self.rotation @ pose.rotation,
            self.scale * (self.rotation @ pose.translation) + self.translation,
            check=False,
        )


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if values.ndim != 2 or valid.shape != values.shape:
            raise InputShapeError(
                f"depth values {values.shape} and validity {valid.shape} must be equal 2D grids"
            )
        with np.errstate(invalid="ignore"):
            valid = valid & np.isfinite(values) & (values > 0)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_array(cls, values, mask=None):
        """Depth map whose validity is finite and positive, optionally masked."""
        values = np.asarray(values, dtype=np.float64)
        valid = np.ones(values.shape, dtype=bool) if mask is None else np.asarray(mask, bool)
        return cls(values, valid)

    @property
    def shape(self):
        return self.values.shape

    def scaled(self, factor):
        return DepthMap(self.values * factor, self.valid)


@dataclass(frozen=True, eq=False)
class FrameCloud:
    """Per-pixel 3D points of one frame; invalid pixels hold NaN."""

    points: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if points.ndim != 3 or points.shape[-1] != 3 or valid.shape != points.shape[:2]:
            raise InputShapeError(
                f"cloud points {points.shape} / validity {valid.shape} are not (H, W, 3) / (H, W)"
            )
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self):
        return self.valid.shape

    def valid_points(self):
        return self.points[self.valid]

    def scaled(self, factor):
        return FrameCloud(self.points * factor, self.valid)


@dataclass(frozen=True, eq=False)
class CloudSequence:
    """Per-frame clouds in the coordinates of frame 0's camera."""

    frames: list
    poses: list
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        if len(self.frames) != len(self.poses):
            raise InputShapeError(
                f"{len(self.frames)} frames but {len(self.poses)} poses"
            )
        shapes = {f.shape for f in self.frames}
        if len(shapes) > 1:
            raise InputShapeError(f"frames have mixed resolutions {sorted(shapes)}")

    def __len__(self):
        return len(self.frames)

    def valid_points(self):
        return [f.valid_points() for f in self.frames]

    def transformed(self, sim):
        """Copy with every frame and pose mapped through a SimTransform."""
        frames = [FrameCloud(sim.apply(f.points), f.valid) for f in self.frames]
        poses = [sim.apply_to_pose(p) for p in self.poses]
        return CloudSequence(frames, poses, self.intrinsics)


def _check_resolution(shape, intr):
    if tuple(shape) != intr.shape:
        raise InputShapeError(
            f"raster is {shape[1]}x{shape[0]} but intrinsics describe "
            f"{intr.width}x{intr.height}"
        )


def unproject(depth, intr):
    """Lift a depth map into a camera-frame point cloud.

    Each valid pixel maps to ``depth * K^-1 @ (x, y, 1)`` with (x, y) the
    pixel center; invalid pixels come out as NaN and invalid.
    """
    _check_resolution(depth.shape, intr)
    points = intr.rays() * depth.values[..., None]
    points[~depth.valid] = np.nan
    return FrameCloud(points, depth.valid.copy())


def project(points, intr):
    """Pinhole projection of (..., 3) camera-frame points to (..., 2) pixel positions."""
    z = points[..., 2]
    x = intr.fx * points[..., 0] / z + intr.cx
    y = intr.fy * points[..., 1] / z + intr.cy
    return np.stack([x, y], axis=-1)


def transform(cloud, pose):
    """Apply a rigid pose to every valid point; validity is unchanged."""
    points = pose.apply(cloud.points)
    points[~cloud.valid] = np.nan
    return FrameCloud(points, cloud.valid.copy())


def compose(a, b):
    """``a @ b``: apply ``b`` first, then ``a``."""
    return PoseSE3(
        a.rotation @ b.rotation, a.rotation @ b.translation + a.translation, check=False
    )


def invert(p):
    rt = p.rotation.T
    return PoseSE3(rt, -(rt @ p.translation), check=False)


def chain(relative):
    """Accumulate relative poses ``P_{k+1,k}`` into absolute poses.

    Returns ``[I, P_{1,0}, P_{1,0} P_{2,1}, ...]``. The rotation is re-projected
    onto SO(3) every ``RENORMALIZE_EVERY`` compositions.
    """
    poses = [PoseSE3.identity()]
    current = poses[0]
    for k, rel in enumerate(relative, start=1):
        current = compose(current, rel)
        if k % RENORMALIZE_EVERY == 0:
            current = PoseSE3(project_to_rotation(current.rotation), current.translation)
        poses.append(current)
    return poses


def assemble_global(clouds, poses, intrinsics=None):
    """Express per-frame camera clouds in frame 0's camera coordinates.

    Frame t receives ``P_0^-1 P_t`` so the output is independent of where the
    input poses anchor the world.
    """
    if len(clouds) != len(poses):
        raise InputShapeError(f"{len(clouds)} clouds but {len(poses)} poses")
    if not clouds:
        raise InputShapeError("cannot assemble an empty sequence")
    base = invert(poses[0])
    rel = [compose(base, p) for p in poses]
    rel[0] = PoseSE3.identity()
    frames = [transform(c, p) for c, p in zip(clouds, rel)]
    if intrinsics is None:
        h, w = clouds[0].shape
        intrinsics = CameraIntrinsics(1.0, 1.0, w / 2, h / 2, w, h)
    return CloudSequence(frames, rel, intrinsics)


def rotation_angle(rotation):
    """Geodesic angle (radians) of a rotation matrix."""
    c = (np.trace(rotation) - 1.0) / 2.0
    s = np.linalg.norm(
        [
            rotation[2, 1] - rotation[1, 2],
            rotation[0, 2] - rotation[2, 0],
            rotation[1, 0] - rotation[0, 1],
        ]
    ) / 2.0
    return float(np.arctan2(s, c))


def rotation_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def random_rotation(rng):
    """Uniformly distributed rotation from a numpy Generator."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
