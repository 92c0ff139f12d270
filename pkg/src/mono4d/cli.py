"""Command-line entry point: reconstruct, evaluate, inspect losses, render synthetic scenes."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from . import fileio
from .errors import InputShapeError, ManifestError, Mono4DError
from .loss import LossWeights
from .metrics import evaluate_pointclouds, evaluate_scene_flow
from .pipeline import WindowConfig, reconstruct_stream
from .refine import RefineParams, SceneObjective, refine_scene
from .synth import PRESETS, build_scene, grid_queries, make_scene


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # one machine-parsable line instead of argparse's multi-line usage dump
        sys.stderr.write(f"error[usage]: {message}\n")
        raise SystemExit(2)


def _fmt():
    return dict(formatter_class=argparse.ArgumentDefaultsHelpFormatter)


def build_parser():
    parser = _Parser(prog="mono4d", description=__doc__, **_fmt())
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("reconstruct", help="reconstruct a scene manifest", **_fmt())
    p.add_argument("manifest", help="manifest.json or its directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--window", type=int, default=4, help="frames per window")
    p.add_argument("--overlap", type=int, default=1, help="frames shared by adjacent windows")
    p.add_argument("--refine", action="store_true", help="refine depth scales and focal first")
    p.add_argument("--refine-iters", type=int, default=200, help="refinement iteration budget")
    p.add_argument("--merged", action="store_true", help="write one merged PLY")
    p.add_argument("--color-by", choices=("frame", "height"), default="frame")
    p.add_argument("--verbose", action="store_true", help="NDJSON refinement trace on stderr")

    p = sub.add_parser("eval-pcd", help="point-cloud metrics against ground truth", **_fmt())
    p.add_argument("pred_dir")
    p.add_argument("gt_manifest")
    p.add_argument("--align", choices=("global", "first-frame"), default="global")
    p.add_argument("--static-only", action="store_true", help="score static pixels only")

    p = sub.add_parser("eval-flow", help="long-term 3D scene flow metrics", **_fmt())
    p.add_argument("pred_dir")
    p.add_argument("gt_manifest")
    p.add_argument("--grid", type=int, default=35, help="query grid size per side")

    p = sub.add_parser("losses", help="loss report of the inputs as given", **_fmt())
    p.add_argument("manifest")

    p = sub.add_parser("synth", help="render a synthetic scene manifest", **_fmt())
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--preset", choices=PRESETS, default="default")
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--grid", type=int, default=35, help="track query grid size per side")
    p.add_argument("--no-dynamic-masks", action="store_true", help="write all-zero dynamic masks")
    p.add_argument("--out", required=True)
    return parser


def _print_json(obj):
    print(json.dumps(obj, indent=2))


def _cmd_reconstruct(args):
    cfg = WindowConfig(args.window, args.overlap)
    manifest = fileio.load_manifest(args.manifest)
    source = fileio.ManifestSource(manifest)
    scene = source.full()
    if args.refine:
        def trace(entry):
            if args.verbose:
                sys.stderr.write(json.dumps(entry) + "\n")

        result = refine_scene(scene, RefineParams(iterations=args.refine_iters), on_iteration=trace)
        report = result.final
        scene = replace(scene, depths=result.depths, intrinsics=result.intrinsics)
    else:
        report, _ = SceneObjective(scene).evaluate(np.zeros(scene.num_frames + 1))
    seq = reconstruct_stream(scene, cfg)
    fileio.write_reconstruction(
        args.out, seq, report, merged=args.merged, color_by=args.color_by
    )
    _print_json(report.to_dict())


def _ground_truth(path):
    manifest = fileio.load_manifest(path)
    if not manifest.has_ground_truth:
        raise ManifestError([f"{manifest.path}: no ground-truth depth and poses"])
    gt, depths = fileio.ground_truth_sequence(manifest)
    return manifest, gt, depths


def _cmd_eval_pcd(args):
    manifest, gt, _ = _ground_truth(args.gt_manifest)
    pred = fileio.read_reconstruction(args.pred_dir)
    if len(pred) != len(gt):
        raise InputShapeError(
            f"prediction has {len(pred)} frames but ground truth has {len(gt)}"
        )
    regions = None
    if args.static_only:
        regions = [manifest.dynamic(t).values == 0 for t in range(manifest.num_frames)]
    report = evaluate_pointclouds(pred, gt, args.align, regions)
    _print_json(report.to_dict())
    print(report.table())


def _grid_tracks(tracks, shape, grid):
    queries = grid_queries(shape, grid)
    pos = tracks.positions[:, tracks.query_frame]
    lattice = {tuple(q) for q in queries}
    keep = np.array([tuple(p) in lattice for p in pos], dtype=bool)
    if not keep.any():
        raise InputShapeError(f"no track starts on the {grid}x{grid} query grid")
    return tracks.subset(keep)


def _cmd_eval_flow(args):
    manifest, gt, depths = _ground_truth(args.gt_manifest)
    if not manifest.has_tracks:
        raise ManifestError([f"{manifest.path}: no tracks file"])
    pred = fileio.read_reconstruction(args.pred_dir)
    if len(pred) != len(gt):
        raise InputShapeError(
            f"prediction has {len(pred)} frames but ground truth has {len(gt)}"
        )
    tracks = _grid_tracks(manifest.tracks(), manifest.shape, args.grid)
    report = evaluate_scene_flow(pred, gt, tracks, depths)
    _print_json(report.to_dict())
    print(report.table())


def _cmd_losses(args):
    manifest = fileio.load_manifest(args.manifest)
    scene = fileio.ManifestSource(manifest).full()
    report, _ = SceneObjective(scene, LossWeights()).evaluate(np.zeros(scene.num_frames + 1))
    _print_json(report.to_dict())


def _cmd_synth(args):
    spec = make_scene(args.preset, args.seed, args.frames, args.height, args.width)
    scene = build_scene(spec, grid=args.grid)
    path = fileio.write_synthetic_scene(
        scene, args.out, with_dynamic_masks=not args.no_dynamic_masks
    )
    print(str(path))


_COMMANDS = {
    "reconstruct": _cmd_reconstruct,
    "eval-pcd": _cmd_eval_pcd,
    "eval-flow": _cmd_eval_flow,
    "losses": _cmd_losses,
    "synth": _cmd_synth,
}


def _one_line(text):
    return " ".join(str(text).split())


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    # window sizes are checked before touching any file
    if args.command == "reconstruct" and not 1 <= args.overlap < args.window:
        parser.error(f"--overlap must satisfy 1 <= overlap < window; got {args.overlap} and {args.window}")
    if args.command == "reconstruct" and args.refine_iters < 0:
        parser.error("--refine-iters must be >= 0")
    try:
        _COMMANDS[args.command](args)
    except Mono4DError as exc:
        sys.stderr.write(f"error[{exc.category}]: {_one_line(exc)}\n")
        return 1
    except OSError as exc:
        sys.stderr.write(f"error[io]: {_one_line(exc)}\n")
        return 1
    except ValueError as exc:
        sys.stderr.write(f"error[value]: {_one_line(exc)}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
