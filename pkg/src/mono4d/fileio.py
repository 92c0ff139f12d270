"""Raster, point-cloud and JSON formats, scene manifests and their validation.

Geometry files are in meters. Depth and flow components are single-channel
PFM, dense output clouds are three-channel PFM, masks are 8-bit PGM (or PFM)
and exported clouds are binary little-endian PLY.
"""

from __future__ import annotations

import colorsys
import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from .core import CameraIntrinsics, CloudSequence, DepthMap, FrameCloud, PoseSE3, assemble_global
from .corr import DEFAULT_EDGE_THRESHOLD, ConfidenceMask, FlowField, TrackSet
from .errors import (
    DimensionMismatchError,
    FormatError,
    InputShapeError,
    MalformedHeaderError,
    ManifestError,
    SchemaError,
    TruncatedPayloadError,
)

POSE_CONVENTION = "camera_to_world"
THREADS_ENV = "MONO4D_THREADS"


def worker_count():
    """Thread cap from MONO4D_THREADS (0 or unset = one per CPU)."""
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError(f"{THREADS_ENV} must be >= 0, got {n}")
    return n if n > 0 else (os.cpu_count() or 1)


def _parallel_map(fn, items):
    items = list(items)
    workers = min(worker_count(), max(len(items), 1))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- PFM / PGM


def write_pfm(path, array):
    """Write an (H, W) or (H, W, 3) array as little-endian float32 PFM."""
    a = np.asarray(array, dtype=np.float32)
    if a.ndim == 2:
        magic = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"PF"
    else:
        raise InputShapeError(f"PFM holds (H, W) or (H, W, 3) data, got {a.shape}")
    h, w = a.shape[:2]
    header = magic + b"\n" + f"{w} {h}\n-1.0\n".encode("ascii")
    # rows are stored bottom to top
    payload = np.ascontiguousarray(a[::-1]).astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def _header_lines(data, count, path):
    """Split ``count`` newline-terminated header lines; return them with offsets."""
    lines, pos = [], 0
    for _ in range(count):
        end = data.find(b"\n", pos)
        if end < 0 or end - pos > 256:
            raise MalformedHeaderError(path, pos, "header line is not newline-terminated")
        lines.append((pos, data[pos:end].decode("ascii", errors="replace").strip()))
        pos = end + 1
    return lines, pos


def read_pfm(path, expect_shape=None):
    """Read a PFM file into a float32 array in top-to-bottom row order.

    Args:
        expect_shape: optional (H, W) the raster must have.
    """
    path = str(path)
    data = Path(path).read_bytes()
    lines, pos = _header_lines(data, 3, path)
    (o1, magic), (o2, dims), (o3, scale_txt) = lines
    if magic not in ("PF", "Pf"):
        raise MalformedHeaderError(path, o1, f"bad magic {magic!r}, expected 'PF' or 'Pf'")
    m = re.fullmatch(r"(\d+)\s+(\d+)", dims)
    if not m:
        raise MalformedHeaderError(path, o2, f"bad dimensions line {dims!r}")
    w, h = int(m.group(1)), int(m.group(2))
    try:
        scale = float(scale_txt)
    except ValueError:
        raise MalformedHeaderError(path, o3, f"bad scale {scale_txt!r}") from None
    if scale == 0 or not np.isfinite(scale):
        raise MalformedHeaderError(path, o3, f"scale must be finite and non-zero, got {scale_txt}")
    channels = 3 if magic == "PF" else 1
    need = w * h * channels * 4
    have = len(data) - pos
    if have < need:
        raise TruncatedPayloadError(path, len(data), f"payload has {have} bytes, expected {need}")
    if have > need:
        raise FormatError(path, pos + need, f"{have - need} unexpected bytes after the payload")
    if expect_shape is not None and (h, w) != tuple(expect_shape):
        raise DimensionMismatchError(
            path, o2, f"raster is {w}x{h}, expected {expect_shape[1]}x{expect_shape[0]}"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=pos)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return a.reshape(shape)[::-1].astype(np.float32)


def write_pgm(path, values):
    """Write confidences in [0, 1] as 8-bit binary PGM (255 = 1.0)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise InputShapeError(f"PGM holds (H, W) data, got {v.shape}")
    if not np.all((v >= 0) & (v <= 1)):
        raise ValueError("mask values must lie in [0, 1]")
    h, w = v.shape
    pixels = np.rint(v * 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path, expect_shape=None):
    """Read an 8-bit binary PGM as confidences ``value / maxval``."""
    path = str(path)
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    # magic, width, height, maxval separated by whitespace, with '#' comments
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise MalformedHeaderError(path, pos, "header ends early")
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append((start, data[start:pos].decode("ascii", errors="replace")))
    (o_magic, magic), (o_w, ws), (o_h, hs), (o_max, ms) = tokens
    if magic != "P5":
        raise MalformedHeaderError(path, o_magic, f"bad magic {magic!r}, expected 'P5'")
    for off, tok in ((o_w, ws), (o_h, hs), (o_max, ms)):
        if not tok.isdigit():
            raise MalformedHeaderError(path, off, f"expected an integer, got {tok!r}")
    w, h, maxval = int(ws), int(hs), int(ms)
    if not 0 < maxval < 256:
        raise MalformedHeaderError(path, o_max, f"only 8-bit PGM is supported (maxval {maxval})")
    pos += 1
    need = w * h
    have = len(data) - pos
    if have < need:
        raise TruncatedPayloadError(path, len(data), f"payload has {have} bytes, expected {need}")
    if have > need:
        raise FormatError(path, pos + need, f"{have - need} unexpected bytes after the payload")
    if expect_shape is not None and (h, w) != tuple(expect_shape):
        raise DimensionMismatchError(
            path, o_w, f"raster is {w}x{h}, expected {expect_shape[1]}x{expect_shape[0]}"
        )
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w)
    return pixels.astype(np.float64) / maxval


def read_mask(path, expect_shape=None):
    """Confidence mask from a .pgm or .pfm file."""
    if str(path).lower().endswith(".pfm"):
        values = read_pfm(path, expect_shape).astype(np.float64)
        if values.ndim != 2:
            raise DimensionMismatchError(str(path), 0, "mask PFM must be single-channel")
        if not np.all((values >= 0) & (values <= 1)):
            raise FormatError(str(path), 0, "mask values must lie in [0, 1]")
        return ConfidenceMask(values)
    return ConfidenceMask(read_pgm(path, expect_shape))


def read_depth(path, expect_shape=None):
    values = read_pfm(path, expect_shape)
    if values.ndim != 2:
        raise DimensionMismatchError(str(path), 0, "depth PFM must be single-channel")
    return DepthMap.from_array(values.astype(np.float64))


def write_depth(path, depth):
    write_pfm(path, np.where(depth.valid, depth.values, 0.0))


def read_flow(path_u, path_v, expect_shape=None):
    u = read_pfm(path_u, expect_shape)
    v = read_pfm(path_v, expect_shape)
    if u.ndim != 2 or v.ndim != 2:
        raise DimensionMismatchError(str(path_u), 0, "flow PFMs must be single-channel")
    if u.shape != v.shape:
        raise DimensionMismatchError(str(path_v), 0, f"flow v is {v.shape}, u is {u.shape}")
    return FlowField(u.astype(np.float64), v.astype(np.float64))


def write_flow(path_u, path_v, flow):
    write_pfm(path_u, np.where(flow.valid, flow.du, np.nan))
    write_pfm(path_v, np.where(flow.valid, flow.dv, np.nan))


def write_cloud(path, cloud):
    """Dense (H, W, 3) cloud as three-channel PFM, NaN where invalid."""
    write_pfm(path, np.where(cloud.valid[..., None], cloud.points, np.nan))


def read_cloud(path, expect_shape=None):
    a = read_pfm(path, expect_shape)
    if a.ndim != 3:
        raise DimensionMismatchError(str(path), 0, "cloud PFM must be three-channel")
    a = a.astype(np.float64)
    return FrameCloud(a, np.all(np.isfinite(a), axis=-1))


# ---------------------------------------------------------------- PLY

_PLY_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
)


def write_ply(path, points, colors=None):
    """Binary little-endian PLY with float32 xyz and uchar RGB per vertex."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if colors is None:
        colors = np.full((len(points), 3), 200, dtype=np.uint8)
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    if len(colors) != len(points):
        raise InputShapeError(f"{len(colors)} colors for {len(points)} points")
    records = np.empty(len(points), dtype=_PLY_DTYPE)
    for k, name in enumerate("xyz"):
        records[name] = points[:, k]
    for k, name in enumerate(("red", "green", "blue")):
        records[name] = colors[:, k]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    Path(path).write_bytes(header.encode("ascii") + records.tobytes())


def _frame_color(t, n):
    r, g, b = colorsys.hsv_to_rgb((t / max(n, 1)) * 0.8, 0.85, 0.95)
    return np.array([round(r * 255), round(g * 255), round(b * 255)], dtype=np.uint8)


def _height_colors(points, lo, hi):
    # height runs along -y of the first camera; blue (low) to red (high)
    h = -points[:, 1]
    span = hi - lo if hi > lo else 1.0
    u = np.clip((h - lo) / span, 0.0, 1.0)
    out = np.empty((len(points), 3), dtype=np.uint8)
    out[:, 0] = np.rint(255 * u)
    out[:, 1] = np.rint(255 * (1 - np.abs(2 * u - 1)))
    out[:, 2] = np.rint(255 * (1 - u))
    return out


def export_ply(seq, out_dir, merged=False, color_by="frame"):
    """Write a CloudSequence as per-frame ``frame_{t:05}.ply`` or one ``merged.ply``.

    Returns:
        list of written paths.
    """
    if len(seq) == 0:
        raise InputShapeError("cannot export an empty sequence")
    if color_by not in ("frame", "height"):
        raise ValueError(f"color_by must be 'frame' or 'height', got {color_by!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pts = [f.valid_points() for f in seq.frames]
    heights = [-p[:, 1] for p in pts if len(p)]
    lo = float(min(h.min() for h in heights)) if heights else 0.0
    hi = float(max(h.max() for h in heights)) if heights else 1.0
    colors = []
    for t, p in enumerate(pts):
        if color_by == "frame":
            colors.append(np.tile(_frame_color(t, len(pts)), (len(p), 1)))
        else:
            colors.append(_height_colors(p, lo, hi))
    if merged:
        path = out_dir / "merged.ply"
        write_ply(path, np.concatenate(pts), np.concatenate(colors))
        return [path]
    paths = []
    for t, (p, c) in enumerate(zip(pts, colors)):
        path = out_dir / f"frame_{t:05}.ply"
        write_ply(path, p, c)
        paths.append(path)
    return paths


# ---------------------------------------------------------------- JSON

_NUMBER = {"type": "number"}
_INT = {"type": "integer"}

INTRINSICS_SCHEMA = {
    "type": "object",
    "required": ["fx", "fy", "cx", "cy", "width", "height"],
    "properties": {
        "fx": {"type": "number", "exclusiveMinimum": 0},
        "fy": {"type": "number", "exclusiveMinimum": 0},
        "cx": _NUMBER,
        "cy": _NUMBER,
        "width": {"type": "integer", "minimum": 1},
        "height": {"type": "integer", "minimum": 1},
    },
}

POSES_SCHEMA = {
    "type": "object",
    "required": ["convention", "poses"],
    "properties": {
        "convention": {"const": POSE_CONVENTION},
        "poses": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["rotation", "translation"],
                "properties": {
                    "rotation": {"type": "array", "items": _NUMBER, "minItems": 9, "maxItems": 9},
                    "translation": {
                        "type": "array",
                        "items": _NUMBER,
                        "minItems": 3,
                        "maxItems": 3,
                    },
                },
            },
        },
    },
}

TRACKS_SCHEMA = {
    "type": "object",
    "required": ["num_tracks", "num_frames", "positions", "visibility"],
    "properties": {
        "num_tracks": {"type": "integer", "minimum": 0},
        "num_frames": {"type": "integer", "minimum": 1},
        "query_frame": {"type": "integer", "minimum": 0},
        "positions": {"type": "array", "items": _NUMBER},
        "visibility": {"type": "array", "items": {"type": ["boolean", "integer"]}},
    },
}

_PATHS = {"type": "array", "items": {"type": "string"}}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["scene_id", "num_frames", "height", "width", "intrinsics", "depth", "flow"],
    "properties": {
        "scene_id": {"type": "string"},
        "num_frames": {"type": "integer", "minimum": 1},
        "height": {"type": "integer", "minimum": 1},
        "width": {"type": "integer", "minimum": 1},
        "intrinsics": INTRINSICS_SCHEMA,
        "depth": _PATHS,
        "flow": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["u", "v"],
                "properties": {"u": {"type": "string"}, "v": {"type": "string"}},
            },
        },
        "dynamic_mask": _PATHS,
        "reference_depth": _PATHS,
        "tracks": {"type": "string"},
        "edge_rel_threshold": {"type": "number", "exclusiveMinimum": 0},
        "gt": {
            "type": "object",
            "properties": {"depth": _PATHS, "poses": {"type": "string"}},
        },
    },
}


def _pointer(path):
    return "/" + "/".join(str(p) for p in path)


def schema_problems(obj, schema, source):
    """Every schema violation as a SchemaError, in document order."""
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(obj), key=lambda e: [str(p) for p in e.absolute_path])
    return [SchemaError(source, _pointer(e.absolute_path), e.message) for e in errors]


def _check_schema(obj, schema, source):
    problems = schema_problems(obj, schema, source)
    if problems:
        raise problems[0]


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(str(path), exc.pos, f"invalid JSON: {exc.msg}") from None


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def intrinsics_to_dict(intr):
    return intr.to_dict()


def intrinsics_from_dict(obj, source="intrinsics"):
    _check_schema(obj, INTRINSICS_SCHEMA, source)
    try:
        return CameraIntrinsics(**{k: obj[k] for k in INTRINSICS_SCHEMA["required"]})
    except ValueError as exc:
        raise SchemaError(source, "", str(exc)) from None


def write_intrinsics(path, intr):
    _dump_json(path, intrinsics_to_dict(intr))


def read_intrinsics(path):
    return intrinsics_from_dict(_load_json(path), str(path))


def poses_to_dict(poses):
    return {
        "convention": POSE_CONVENTION,
        "poses": [
            {
                "rotation": [float(x) for x in p.rotation.ravel()],
                "translation": [float(x) for x in p.translation],
            }
            for p in poses
        ],
    }


def poses_from_dict(obj, source="poses"):
    """Camera-to-world poses; any other convention is rejected, never inverted."""
    if isinstance(obj, dict) and obj.get("convention", POSE_CONVENTION) != POSE_CONVENTION:
        raise SchemaError(
            source,
            "/convention",
            f"unsupported pose convention {obj['convention']!r}; expected {POSE_CONVENTION!r}",
        )
    _check_schema(obj, POSES_SCHEMA, source)
    out = []
    for k, p in enumerate(obj["poses"]):
        try:
            out.append(PoseSE3(np.reshape(p["rotation"], (3, 3)), p["translation"]))
        except ValueError as exc:
            raise SchemaError(source, f"/poses/{k}/rotation", str(exc)) from None
    return out


def write_poses(path, poses):
    _dump_json(path, poses_to_dict(poses))


def read_poses(path):
    return poses_from_dict(_load_json(path), str(path))


def tracks_to_dict(tracks):
    return {
        "num_tracks": int(tracks.num_tracks),
        "num_frames": int(tracks.num_frames),
        "query_frame": int(tracks.query_frame),
        "positions": [float(x) for x in tracks.positions.ravel()],
        "visibility": [int(x) for x in tracks.visible.ravel()],
    }


def tracks_from_dict(obj, source="tracks"):
    _check_schema(obj, TRACKS_SCHEMA, source)
    n, t = obj["num_tracks"], obj["num_frames"]
    if len(obj["positions"]) != n * t * 2:
        raise SchemaError(
            source, "/positions", f"{len(obj['positions'])} values, expected {n * t * 2}"
        )
    if len(obj["visibility"]) != n * t:
        raise SchemaError(
            source, "/visibility", f"{len(obj['visibility'])} values, expected {n * t}"
        )
    q = obj.get("query_frame", 0)
    if q >= t:
        raise SchemaError(source, "/query_frame", f"query frame {q} outside {t} frames")
    positions = np.asarray(obj["positions"], dtype=np.float64).reshape(n, t, 2)
    visible = np.asarray(obj["visibility"], dtype=bool).reshape(n, t)
    try:
        return TrackSet(positions, visible, q)
    except ValueError as exc:
        raise SchemaError(source, "/positions", str(exc)) from None


def write_tracks(path, tracks):
    _dump_json(path, tracks_to_dict(tracks))


def read_tracks(path):
    return tracks_from_dict(_load_json(path), str(path))


# ---------------------------------------------------------------- manifests


class SceneManifest:
    """Parsed ``manifest.json`` with paths resolved against its directory."""

    def __init__(self, path, data):
        self.path = Path(path)
        self.root = self.path.parent
        self.data = data
        self.scene_id = data["scene_id"]
        self.num_frames = data["num_frames"]
        self.shape = (data["height"], data["width"])
        self.intrinsics = CameraIntrinsics(
            **{k: data["intrinsics"][k] for k in INTRINSICS_SCHEMA["required"]}
        )
        self.edge_threshold = data.get("edge_rel_threshold", DEFAULT_EDGE_THRESHOLD)

    def resolve(self, rel):
        return self.root / rel

    def paths(self, key):
        return [self.resolve(p) for p in self.data.get(key, [])]

    @property
    def has_tracks(self):
        return "tracks" in self.data

    @property
    def has_ground_truth(self):
        gt = self.data.get("gt", {})
        return "depth" in gt and "poses" in gt

    def depth(self, t):
        return read_depth(self.paths("depth")[t], self.shape)

    def flow(self, k):
        f = self.data["flow"][k]
        return read_flow(self.resolve(f["u"]), self.resolve(f["v"]), self.shape)

    def dynamic(self, t):
        paths = self.paths("dynamic_mask")
        if not paths:
            return ConfidenceMask.zeros(self.shape)
        return read_mask(paths[t], self.shape)

    def reference(self, t):
        return read_depth(self.paths("reference_depth")[t], self.shape)

    def tracks(self):
        return read_tracks(self.resolve(self.data["tracks"])) if self.has_tracks else None

    def gt_depth(self, t):
        return read_depth(self.resolve(self.data["gt"]["depth"][t]), self.shape)

    def gt_poses(self):
        return read_poses(self.resolve(self.data["gt"]["poses"]))


class ManifestSource:
    """Lazy per-window access to a validated manifest's inputs."""

    def __init__(self, manifest, depth_scale=1.0):
        self.manifest = manifest
        self.depth_scale = depth_scale
        self.num_frames = manifest.num_frames
        self.intrinsics = manifest.intrinsics
        self._tracks = None

    @property
    def track_set(self):
        if self._tracks is None and self.manifest.has_tracks:
            self._tracks = self.manifest.tracks()
        return self._tracks

    def window(self, start, stop):
        from .scene import SceneInputs

        m = self.manifest
        frames = range(start, stop)
        depths = _parallel_map(m.depth, frames)
        if self.depth_scale != 1.0:
            depths = [d.scaled(self.depth_scale) for d in depths]
        refs = None
        if m.data.get("reference_depth"):
            refs = _parallel_map(m.reference, frames)
        tracks = self.track_set
        return SceneInputs(
            depths=depths,
            intrinsics=m.intrinsics,
            flows=_parallel_map(m.flow, range(start, stop - 1)),
            dynamic=_parallel_map(m.dynamic, frames),
            tracks=None if tracks is None else tracks.frames(start, stop),
            references=refs,
            edge_threshold=m.edge_threshold,
        )

    def full(self):
        return self.window(0, self.num_frames)


def ground_truth_sequence(manifest):
    """Ground-truth CloudSequence (frame 0 coordinates) from gt depth and poses."""
    from .core import unproject

    depths = _parallel_map(manifest.gt_depth, range(manifest.num_frames))
    clouds = [unproject(d, manifest.intrinsics) for d in depths]
    return assemble_global(clouds, manifest.gt_poses(), manifest.intrinsics), depths


def _problem(exc):
    return str(exc)


def validate_manifest(path):
    """Check a manifest and every file it references.

    Every file is fully parsed, so a manifest with no problems cannot fail to
    load later.

    Returns:
        (SceneManifest or None, list of problem strings).
    """
    path = Path(path)
    try:
        data = _load_json(path)
    except (OSError, FormatError) as exc:
        return None, [_problem(exc)]
    problems = [_problem(e) for e in schema_problems(data, MANIFEST_SCHEMA, str(path))]
    if problems:
        return None, problems
    n = data["num_frames"]
    shape = (data["height"], data["width"])
    intr = data["intrinsics"]
    if (intr["height"], intr["width"]) != shape:
        problems.append(
            f"{path}: /intrinsics: image size {intr['width']}x{intr['height']} differs from "
            f"manifest {shape[1]}x{shape[0]}"
        )
    try:
        CameraIntrinsics(**{k: intr[k] for k in INTRINSICS_SCHEMA["required"]})
    except ValueError as exc:
        problems.append(f"{path}: /intrinsics: {exc}")
    counts = {"depth": n, "flow": max(n - 1, 0), "dynamic_mask": n, "reference_depth": n}
    for key, expected in counts.items():
        if key in data and len(data[key]) != expected:
            problems.append(f"{path}: /{key}: {len(data[key])} entries, expected {expected}")
    gt = data.get("gt", {})
    if "depth" in gt and len(gt["depth"]) != n:
        problems.append(f"{path}: /gt/depth: {len(gt['depth'])} entries, expected {n}")
    if problems:
        return None, problems

    root = path.parent
    checks = []
    for key in ("depth", "reference_depth"):
        checks += [(read_depth, root / p) for p in data.get(key, [])]
    checks += [(read_depth, root / p) for p in gt.get("depth", [])]
    for f in data["flow"]:
        checks += [(read_pfm, root / f["u"]), (read_pfm, root / f["v"])]
    checks += [(read_mask, root / p) for p in data.get("dynamic_mask", [])]

    def run(check):
        fn, file_path = check
        if not file_path.is_file():
            return f"{file_path}: file not found"
        try:
            out = fn(file_path, shape)
            if fn is read_pfm and out.ndim != 2:
                return f"{file_path}: flow PFM must be single-channel"
        except (OSError, FormatError, ValueError) as exc:
            return _problem(exc)
        return None

    problems += [p for p in _parallel_map(run, checks) if p]

    if "tracks" in data:
        tp = root / data["tracks"]
        try:
            tracks = read_tracks(tp)
            if tracks.num_frames != n:
                problems.append(f"{tp}: tracks span {tracks.num_frames} frames, expected {n}")
        except (OSError, FormatError, SchemaError) as exc:
            problems.append(_problem(exc) if not isinstance(exc, OSError) else f"{tp}: {exc}")
    if "poses" in gt:
        pp = root / gt["poses"]
        try:
            poses = read_poses(pp)
            if len(poses) != n:
                problems.append(f"{pp}: {len(poses)} poses, expected {n}")
        except (OSError, FormatError, SchemaError) as exc:
            problems.append(_problem(exc) if not isinstance(exc, OSError) else f"{pp}: {exc}")
    if problems:
        return None, problems
    return SceneManifest(path, data), []


def load_manifest(path):
    """Validated SceneManifest; raises ManifestError listing every problem."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest, problems = validate_manifest(path)
    if problems:
        raise ManifestError(problems)
    return manifest


def write_manifest_dir(out_dir, scene_id, intrinsics, depths, flows, dynamic=None,
                       references=None, tracks=None, gt_depths=None, gt_poses=None,
                       edge_threshold=None):
    """Write rasters, JSON sidecars and ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(depths)
    h, w = intrinsics.shape
    manifest = {
        "scene_id": scene_id,
        "num_frames": n,
        "height": h,
        "width": w,
        "intrinsics": intrinsics.to_dict(),
        "depth": [],
        "flow": [],
    }
    for t, d in enumerate(depths):
        name = f"depth_{t:05}.pfm"
        write_depth(out / name, d)
        manifest["depth"].append(name)
    for k, f in enumerate(flows):
        u, v = f"flow_{k:05}_{k + 1:05}.u.pfm", f"flow_{k:05}_{k + 1:05}.v.pfm"
        write_flow(out / u, out / v, f)
        manifest["flow"].append({"u": u, "v": v})
    if dynamic is not None:
        manifest["dynamic_mask"] = []
        for t, m in enumerate(dynamic):
            name = f"dynamic_{t:05}.pgm"
            write_pgm(out / name, m.values)
            manifest["dynamic_mask"].append(name)
    if references is not None:
        manifest["reference_depth"] = []
        for t, d in enumerate(references):
            name = f"reference_{t:05}.pfm"
            write_depth(out / name, d)
            manifest["reference_depth"].append(name)
    if tracks is not None:
        write_tracks(out / "tracks.json", tracks)
        manifest["tracks"] = "tracks.json"
    if edge_threshold is not None:
        manifest["edge_rel_threshold"] = edge_threshold
    if gt_depths is not None and gt_poses is not None:
        gt = {"depth": [], "poses": "gt_poses.json"}
        for t, d in enumerate(gt_depths):
            name = f"gt_depth_{t:05}.pfm"
            write_depth(out / name, d)
            gt["depth"].append(name)
        write_poses(out / "gt_poses.json", gt_poses)
        manifest["gt"] = gt
    _dump_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def write_synthetic_scene(scene, out_dir, with_dynamic_masks=True):
    """Manifest directory for a rendered synthetic scene, including ground truth."""
    from .synth import SYNTH_EDGE_THRESHOLD

    depths = [f.depth for f in scene.frames]
    shape = scene.intrinsics.shape
    dynamic = [
        f.dynamic if with_dynamic_masks else ConfidenceMask.zeros(shape) for f in scene.frames
    ]
    spec = scene.spec
    return write_manifest_dir(
        out_dir,
        scene_id=f"synth-{spec.trajectory}-seed{spec.seed}-{spec.n_frames}f",
        intrinsics=scene.intrinsics,
        depths=depths,
        flows=scene.flows,
        dynamic=dynamic,
        references=depths,
        tracks=scene.tracks,
        gt_depths=depths,
        gt_poses=scene.poses,
        edge_threshold=SYNTH_EDGE_THRESHOLD,
    )


def write_reconstruction(out_dir, seq, report=None, ply=True, merged=False, color_by="frame"):
    """Dense clouds, poses, intrinsics, optional loss report and PLY exports."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(seq.frames):
        write_cloud(out / f"cloud_{t:05}.pfm", f)
    write_poses(out / "poses.json", seq.poses)
    write_intrinsics(out / "intrinsics.json", seq.intrinsics)
    if report is not None:
        _dump_json(out / "losses.json", report.to_dict())
    if ply:
        export_ply(seq, out / "ply", merged=merged, color_by=color_by)


def read_reconstruction(pred_dir):
    """CloudSequence written by :func:`write_reconstruction`."""
    pred = Path(pred_dir)
    intr = read_intrinsics(pred / "intrinsics.json")
    poses = read_poses(pred / "poses.json")
    frames = _parallel_map(
        lambda t: read_cloud(pred / f"cloud_{t:05}.pfm", intr.shape), range(len(poses))
    )
    return CloudSequence(frames, poses, intr)
