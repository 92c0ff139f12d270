"""Analytic synthetic scenes: a table plane, static boxes and one moving box.

Everything is ray-cast in closed form, so depths, flows, tracks and masks
are exact up to floating point. The world frame has the table at z = 0 with
+z pointing up; cameras look down at it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    CameraIntrinsics,
    DepthMap,
    FrameCloud,
    PoseSE3,
    assemble_global,
    invert,
    rotation_from_axis_angle,
)
from .corr import ConfidenceMask, FlowField, TrackSet

PRESETS = ("default", "static", "orbit", "dolly")
# flying-pixel threshold written into synthetic manifests; every oblique box
# side in these scenes changes depth by more than 1% per pixel
SYNTH_EDGE_THRESHOLD = 0.01
# relative depth agreement for a reprojected point to count as unoccluded
_VISIBILITY_TOL = 1e-7
# clip length used as the time unit of camera jitter and object motion
_CLIP = 40.0


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple
    yaw: float = 0.0

    def rotation(self):
        return rotation_from_axis_angle((0, 0, 1), self.yaw)


@dataclass(frozen=True)
class MovingBox:
    """Box whose center follows ``center + velocity * s + arc * sin(pi s)``
    and spins about ``spin_axis`` at ``spin_rate`` rad per clip unit ``s = t / 40``."""

    center: tuple
    half_extents: tuple
    velocity: tuple
    arc: tuple = (0.0, 0.0, 0.0)
    spin_axis: tuple = (0.0, 0.0, 1.0)
    spin_rate: float = 0.0

    def pose(self, t):
        s = t / _CLIP
        c = (
            np.asarray(self.center, float)
            + np.asarray(self.velocity, float) * s
            + np.asarray(self.arc, float) * np.sin(np.pi * s)
        )
        return PoseSE3(rotation_from_axis_angle(self.spin_axis, self.spin_rate * s), c, check=False)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_frames: int = 40
    height: int = 96
    width: int = 128
    trajectory: str = "handheld"
    jitter_translation: float = 0.004
    jitter_rotation: float = 0.006
    camera_height: float = 0.7
    drift: tuple = (0.12, 0.06, 0.0)
    orbit_sweep: float = 0.5
    jitter_phases: tuple = ()
    static_boxes: tuple = ()
    dynamic: MovingBox = None
    focal: float = 100.0

    @property
    def intrinsics(self):
        return CameraIntrinsics(
            self.focal, self.focal, self.width / 2, self.height / 2, self.width, self.height
        )


def _look_at(position, target, up=(0.0, 1.0, 0.0)):
    f = np.asarray(target, float) - position
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    return np.stack([r, d, f], axis=1)


def make_scene(preset="default", seed=0, n_frames=40, height=96, width=128):
    """Scene for one of :data:`PRESETS`, deterministic in ``seed``."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    rng = np.random.default_rng(seed)
    slots = [(-0.22, -0.14), (0.2, -0.15), (-0.2, 0.15), (0.22, 0.13), (0.02, 0.19)]
    boxes = []
    for x, y in slots:
        hx, hy = rng.uniform(0.04, 0.07, size=2)
        hz = rng.uniform(0.03, 0.08)
        jx, jy = rng.uniform(-0.02, 0.02, size=2)
        boxes.append(Box((x + jx, y + jy, hz), (hx, hy, hz), float(rng.uniform(-0.6, 0.6))))
    # 3 sinusoids per degree of freedom: (amplitude weight, cycles per clip, phase)
    phases = tuple(
        tuple(map(float, row))
        for row in np.column_stack(
            [rng.uniform(0.5, 1.0, 18), rng.uniform(0.5, 2.0, 18), rng.uniform(0, 2 * np.pi, 18)]
        )
    )
    dynamic = None
    if preset != "static":
        dynamic = MovingBox(
            center=(-0.06, -0.03, 0.24),
            half_extents=(0.035, 0.025, 0.02),
            velocity=(0.1, 0.05, 0.0),
            arc=(0.0, 0.03, 0.05),
            spin_axis=(0.3, 0.2, 1.0),
            spin_rate=1.2,
        )
    trajectory = {"orbit": "orbit", "dolly": "dolly"}.get(preset, "handheld")
    return SceneSpec(
        seed=seed,
        n_frames=n_frames,
        height=height,
        width=width,
        trajectory=trajectory,
        jitter_phases=phases,
        static_boxes=tuple(boxes),
        dynamic=dynamic,
    )


def _jitter(spec, t):
    s = t / _CLIP
    out = np.zeros(6)
    if not spec.jitter_phases:
        return out
    rows = np.asarray(spec.jitter_phases).reshape(6, 3, 3)
    for dof in range(6):
        amp, freq, phase = rows[dof].T
        out[dof] = np.sum(amp * np.sin(2 * np.pi * freq * s + phase)) / 3.0
    out[:3] *= spec.jitter_translation
    out[3:] *= spec.jitter_rotation
    return out


def camera_pose(spec, t):
    """Camera-to-world pose of frame ``t`` in scene coordinates."""
    s = t / _CLIP
    jit = _jitter(spec, t)
    if spec.trajectory == "orbit":
        angle = spec.orbit_sweep * (s - 0.5)
        radius = 0.25
        position = np.array(
            [radius * np.sin(angle), -radius * (1 - np.cos(angle)) - 0.1, spec.camera_height]
        )
        base = _look_at(position, (0.0, 0.0, 0.0))
    elif spec.trajectory == "dolly":
        position = np.array([0.0, 0.0, spec.camera_height + 0.1 - 0.2 * s])
        base = np.diag([1.0, -1.0, -1.0])
    else:
        position = np.array([0.0, 0.0, spec.camera_height]) + np.asarray(spec.drift) * (s - 0.5)
        base = np.diag([1.0, -1.0, -1.0])
    rot_jit = np.eye(3)
    if np.any(jit[3:]):
        rot_jit = rotation_from_axis_angle(jit[3:], np.linalg.norm(jit[3:]))
    return PoseSE3(rot_jit @ base, position + jit[:3])


def _box_hits(origins, dirs, pose, half):
    """Entry distance along each ray into an oriented box (inf on a miss), and face ids."""
    o = (origins - pose.translation) @ pose.rotation
    d = dirs @ pose.rotation
    half = np.asarray(half, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    parallel = d == 0
    inside = np.abs(o) <= half
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_near = lo.max(axis=1)
    t_far = hi.min(axis=1)
    axis = lo.argmax(axis=1)
    hit = (t_near <= t_far) & (t_near > 0)
    sign = np.take_along_axis(d, axis[:, None], axis=1)[:, 0] > 0
    face = axis * 2 + sign
    return np.where(hit, t_near, np.inf), face


def _primitives(spec, t):
    prims = [(box.center, box.rotation(), box.half_extents) for box in spec.static_boxes]
    out = [PoseSE3(rot, center, check=False) for center, rot, _ in prims]
    halves = [h for _, _, h in prims]
    if spec.dynamic is not None:
        out.append(spec.dynamic.pose(t))
        halves.append(spec.dynamic.half_extents)
    return out, halves


def cast_rays(spec, t, origin, dirs):
    """Closest intersection of world rays with the scene at time ``t``.

    Args:
        origin: (3,) ray origin (the camera center).
        dirs: (N, 3) ray directions; the returned distance is in units of
            these vectors, so camera rays with unit z give depth directly.

    Returns:
        (dist, obj, facet): ``obj`` is -1 for a miss, 0 for the table,
        1..k for static boxes and k+1 for the moving box.
    """
    origin = np.asarray(origin, float)
    origins = np.broadcast_to(origin, dirs.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_table = -origins[:, 2] / dirs[:, 2]
    dist = np.where(t_table > 0, t_table, np.inf)
    obj = np.where(np.isfinite(dist), 0, -1)
    facet = np.zeros(len(dirs), dtype=np.int64)
    poses, halves = _primitives(spec, t)
    for k, (pose, half) in enumerate(zip(poses, halves), start=1):
        tk, face = _box_hits(origins, dirs, pose, half)
        closer = tk < dist
        dist = np.where(closer, tk, dist)
        obj = np.where(closer, k, obj)
        facet = np.where(closer, k * 6 + face, facet)
    return dist, obj, facet


def dynamic_id(spec):
    return len(spec.static_boxes) + 1 if spec.dynamic is not None else None


def _camera_rays(intr, positions):
    x = positions[..., 0]
    y = positions[..., 1]
    return np.stack([(x - intr.cx) / intr.fx, (y - intr.cy) / intr.fy, np.ones_like(x)], axis=-1)


@dataclass(frozen=True, eq=False)
class RenderedFrame:
    depth: DepthMap
    cloud: FrameCloud
    dynamic: ConfidenceMask
    world: np.ndarray
    object_id: np.ndarray
    facet: np.ndarray
    pose: PoseSE3


def render_frame(spec, t):
    """Depth, camera-frame cloud and exact moving-object silhouette of frame ``t``."""
    if not 0 <= t < spec.n_frames:
        raise ValueError(f"frame {t} outside [0, {spec.n_frames})")
    intr = spec.intrinsics
    pose = camera_pose(spec, t)
    rays_cam = intr.rays()
    dirs = rays_cam.reshape(-1, 3) @ pose.rotation.T
    dist, obj, facet = cast_rays(spec, t, pose.translation, dirs)
    h, w = intr.shape
    dist = dist.reshape(h, w)
    valid = np.isfinite(dist)
    depth_values = np.where(valid, dist, 0.0)
    depth = DepthMap(depth_values, valid)
    cam = rays_cam * depth_values[..., None]
    cam[~valid] = np.nan
    world = pose.apply(cam)
    dyn = dynamic_id(spec)
    obj = obj.reshape(h, w)
    moving = (obj == dyn) if dyn is not None else np.zeros((h, w), bool)
    return RenderedFrame(
        depth=depth,
        cloud=FrameCloud(cam, valid),
        dynamic=ConfidenceMask(moving.astype(float)),
        world=world,
        object_id=obj,
        facet=facet.reshape(h, w),
        pose=pose,
    )


def _move(spec, points, obj, t_from, t_to):
    """Carry surface points of the moving box from time t_from to t_to."""
    dyn = dynamic_id(spec)
    if dyn is None or t_from == t_to:
        return points
    out = points.copy()
    sel = obj == dyn
    if np.any(sel):
        a = spec.dynamic.pose(t_from)
        b = spec.dynamic.pose(t_to)
        local = (points[sel] - a.translation) @ a.rotation
        out[sel] = local @ b.rotation.T + b.translation
    return out


def _observe(spec, world, obj, t):
    """Project world points into frame t and test visibility by ray casting."""
    intr = spec.intrinsics
    pose = camera_pose(spec, t)
    cam = (world - pose.translation) @ pose.rotation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = intr.fx * cam[:, 0] / z + intr.cx
        y = intr.fy * cam[:, 1] / z + intr.cy
    pos = np.stack([x, y], axis=1)
    ok = np.isfinite(z) & (z > 0) & (x >= 0) & (x <= intr.width) & (y >= 0) & (y <= intr.height)
    visible = np.zeros(len(world), dtype=bool)
    if np.any(ok):
        dirs = _camera_rays(intr, pos[ok]) @ pose.rotation.T
        dist, hit_obj, _ = cast_rays(spec, t, pose.translation, dirs)
        visible[ok] = (np.abs(dist - z[ok]) <= _VISIBILITY_TOL * z[ok]) & (hit_obj == obj[ok])
    return pos, visible


def surface_points(spec, t, positions):
    """World points and object ids seen at continuous ``positions`` of frame t."""
    intr = spec.intrinsics
    pose = camera_pose(spec, t)
    positions = np.asarray(positions, float).reshape(-1, 2)
    rays = _camera_rays(intr, positions)
    dist, obj, _ = cast_rays(spec, t, pose.translation, rays @ pose.rotation.T)
    hit = np.isfinite(dist)
    world = np.where(hit[:, None], pose.apply(rays * np.where(hit, dist, 0.0)[:, None]), np.nan)
    return world, obj, hit


def flow_at(spec, i, j, positions):
    """Exact displacement of frame-i positions into frame j.

    Returns:
        (flow, valid): (N, 2) displacements and (N,) booleans; invalid where
        the surface point leaves the view or is occluded in frame j.
    """
    positions = np.asarray(positions, float).reshape(-1, 2)
    world, obj, hit = surface_points(spec, i, positions)
    moved = _move(spec, world, obj, i, j)
    pos_j, visible = _observe(spec, np.where(hit[:, None], moved, 0.0), obj, j)
    valid = hit & visible
    flow = np.where(valid[:, None], pos_j - positions, np.nan)
    return flow, valid


def render_flow(spec, i, j):
    """Dense flow from frame i to frame j at every pixel center of frame i."""
    intr = spec.intrinsics
    x, y = intr.pixel_grid()
    flow, valid = flow_at(spec, i, j, np.stack([x, y], axis=-1))
    h, w = intr.shape
    return FlowField(flow[:, 0].reshape(h, w), flow[:, 1].reshape(h, w), valid.reshape(h, w))


def grid_queries(shape, n):
    """Pixel centers closest to an n x n grid spread evenly over the image."""
    h, w = shape
    xs = np.floor((np.arange(n) + 0.5) * w / n) + 0.5
    ys = np.floor((np.arange(n) + 0.5) * h / n) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def render_tracks(spec, grid=35):
    """Tracks seeded on a ``grid x grid`` lattice of frame 0, plus 3D ground truth.

    Returns:
        (tracks, trajectories): a TrackSet and a list of Trajectory3D whose
        positions are in frame 0's camera coordinates.
    """
    from .metrics import Trajectory3D

    queries = grid_queries((spec.height, spec.width), grid)
    world0, obj, hit = surface_points(spec, 0, queries)
    n, frames = len(queries), spec.n_frames
    positions = np.zeros((n, frames, 2))
    visible = np.zeros((n, frames), dtype=bool)
    world = np.full((n, frames, 3), np.nan)
    safe0 = np.where(hit[:, None], world0, 0.0)
    for t in range(frames):
        moved = _move(spec, safe0, obj, 0, t)
        pos, vis = _observe(spec, moved, obj, t)
        if t == 0:
            pos = queries.copy()
        positions[:, t] = np.where(np.isfinite(pos), pos, 0.0)
        visible[:, t] = vis & hit
        world[:, t] = np.where(hit[:, None], moved, np.nan)
    to_seq = invert(camera_pose(spec, 0))
    trajectories = [
        Trajectory3D(to_seq.apply(world[k]), visible[k].copy()) for k in range(n)
    ]
    return TrackSet(positions, visible, 0), trajectories


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    spec: SceneSpec
    frames: list
    flows: list
    tracks: TrackSet
    trajectories: list
    poses: list = field(default_factory=list)

    @property
    def intrinsics(self):
        return self.spec.intrinsics

    def ground_truth(self):
        """Exact CloudSequence relative to frame 0."""
        return assemble_global([f.cloud for f in self.frames], self.poses, self.intrinsics)

    def diameter(self):
        pts = np.concatenate([f.world[f.depth.valid] for f in self.frames])
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))

    def inputs(self, with_dynamic_masks=True, edge_threshold=SYNTH_EDGE_THRESHOLD):
        """Exact SceneInputs: depths, intrinsics, adjacent flows, masks, tracks, references."""
        from .scene import SceneInputs

        shape = self.intrinsics.shape
        dynamic = [
            f.dynamic if with_dynamic_masks else ConfidenceMask.zeros(shape) for f in self.frames
        ]
        return SceneInputs(
            depths=[f.depth for f in self.frames],
            intrinsics=self.intrinsics,
            flows=list(self.flows),
            dynamic=dynamic,
            tracks=self.tracks,
            references=[f.depth for f in self.frames],
            edge_threshold=edge_threshold,
        )


def build_scene(spec, grid=35):
    """Render every frame, adjacent-frame flow and grid tracks of a scene."""
    frames = [render_frame(spec, t) for t in range(spec.n_frames)]
    flows = [render_flow(spec, t, t + 1) for t in range(spec.n_frames - 1)]
    tracks, trajectories = render_tracks(spec, grid)
    return SyntheticScene(
        spec=spec,
        frames=frames,
        flows=flows,
        tracks=tracks,
        trajectories=trajectories,
        poses=[f.pose for f in frames],
    )


def with_frames(spec, n_frames):
    return replace(spec, n_frames=n_frames)
