"""Command-line interface.

Subcommands: synth-dataset, train, render, annotate, eval. All outputs land
under the given output directory with atomic writes; a ``run.json`` records
the effective config and its hash so runs can be told apart after the fact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .scene import CameraPose, KinematicState, Scene
from .datasets import load_dataset, init_scene
from .deform import DeformationField, load_field, save_field
from .synthetic import SyntheticSceneSpec, generate_synthetic, image_to_u8, save_png
from .training import ScheduleConfig, Trainer, load_image
from .rasterizer import render
from .annotation import (AnnotationOutput, DeltaThresholds, aabb_to_xywh,
                         render_mask, yolo_line)
from .ply import load_gaussian_ply
from ._util import atomic_write_text, sha256_of_obj, write_json

log = logging.getLogger(__name__)


def _write_run_json(out_dir: Path, command: str, config: dict, seed: int) -> None:
    write_json(out_dir / "run.json", {
        "command": command,
        "config": config,
        "config_sha256": sha256_of_obj(config),
        "seed": seed,
        "versions": {
            "kinsplat": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
    })


def _parse_pose(values) -> KinematicState:
    if len(values) != 8:
        raise ValueError("--pose takes 8 numbers: tx ty tz qw qx qy qz jaw")
    return KinematicState.from_vector(np.asarray(values, dtype=np.float64))


def _parse_camera(arg: str) -> CameraPose:
    text = arg if arg.lstrip().startswith("{") else Path(arg).read_text(encoding="utf-8")
    return CameraPose.from_dict(json.loads(text))


def load_checkpoint(path) -> tuple[Scene, DeformationField]:
    """A checkpoint is a directory holding scene_final.ply + field_final.ksf."""
    path = Path(path)
    scene_path = path / "scene_final.ply"
    field_path = path / "field_final.ksf"
    for p in (scene_path, field_path):
        if not p.is_file():
            raise FileNotFoundError(f"checkpoint incomplete: missing {p}")
    scene = load_gaussian_ply(scene_path, active_sh_degree=3)
    field_ = load_field(field_path)
    # Sizes are desk scale; the extent drives annotation thresholds, so
    # recover it from the point spread rather than defaulting to 1.
    center = scene.mu.mean(axis=0)
    scene.extent = float(np.linalg.norm(scene.mu - center, axis=1).max())
    return scene, field_


def _apply_threads(threads: int | None) -> None:
    if threads is None:
        return
    try:
        import numba

        numba.set_num_threads(max(1, threads))
    except (ImportError, ValueError):  # pragma: no cover
        log.warning("could not apply --threads=%s", threads)


# --- subcommands ---------------------------------------------------------------


def cmd_synth_dataset(args) -> int:
    spec = (SyntheticSceneSpec.from_file(args.spec) if args.spec != "-"
            else SyntheticSceneSpec.from_dict(json.load(sys.stdin)))
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out_dir)
    generate_synthetic(spec, out)
    _write_run_json(out, "synth-dataset", spec.to_dict(), spec.seed)
    print(f"dataset written to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = ScheduleConfig.from_file(args.config) if args.config else ScheduleConfig()
    if args.iters is not None:
        cfg.max_iters = args.iters
    if args.set:
        cfg.apply_overrides(dict(kv.split("=", 1) for kv in args.set))
    cfg.validate()
    seed = args.seed if args.seed is not None else 0

    frames, (points, colors), manifest = load_dataset(args.manifest)
    scene = init_scene(points, colors, manifest.scene_extent)
    field_ = DeformationField(
        depth=args.field_depth, width=args.field_width,
        norm=manifest.normalization(), seed=seed)
    out = Path(args.out_dir)
    trainer = Trainer(scene, field_, frames, cfg, out_dir=out, seed=seed)
    _write_run_json(out, "train", cfg.to_dict(), seed)
    rows = trainer.run()

    from .reports import training_figure

    training_figure(rows, out / "training_curves.png")
    last = rows[-1]
    print(f"trained {last['iter']} iterations: loss {last['loss']:.5f}, "
          f"PSNR {last['PSNR']:.2f} dB, {last['gaussian_count']} gaussians")
    return 0


def cmd_render(args) -> int:
    scene, field_ = load_checkpoint(args.checkpoint)
    kin = _parse_pose(args.pose)
    cam = _parse_camera(args.camera)
    deltas = field_.predict_deltas_batch(scene.mu, kin)
    image = np.clip(render(scene, cam, deltas).image, 0.0, 1.0)
    save_png(args.out, image_to_u8(image))
    print(f"rendered {args.out}")
    return 0


def _annotate_one(scene, field_, kin, cam, out_dir: Path, name: str,
                  th: DeltaThresholds) -> AnnotationOutput:
    out = render_mask(scene, field_, kin, cam, th)
    save_png(out_dir / f"{name}_mask.png", out.mask.astype(np.uint8) * 255)
    boxes = {"frame_id": name, "aabb": None, "contour_box": None}
    yolo = ""
    if not out.empty:
        boxes["aabb"] = aabb_to_xywh(out.aabb)
        boxes["contour_box"] = np.asarray(out.contour_box).round(3).tolist()
        yolo = yolo_line(out.aabb, cam.width, cam.height) + "\n"
    write_json(out_dir / f"{name}_boxes.json", boxes)
    atomic_write_text(out_dir / f"{name}_boxes.txt", yolo)
    return out


def cmd_annotate(args) -> int:
    scene, field_ = load_checkpoint(args.checkpoint)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    th = DeltaThresholds.for_scene(scene)
    if args.manifest:
        frames, _, _ = load_dataset(args.manifest)
        for frame in frames:
            _annotate_one(scene, field_, frame.kinematics, frame.camera,
                          out_dir, frame.name, th)
        print(f"annotated {len(frames)} frames into {out_dir}")
        return 0
    if args.pose is None or args.camera is None:
        raise ValueError("annotate needs either --manifest or both --pose and --camera")
    kin = _parse_pose(args.pose)
    cam = _parse_camera(args.camera)
    out = _annotate_one(scene, field_, kin, cam, out_dir, args.name, th)
    state = "empty mask" if out.empty else f"aabb {aabb_to_xywh(out.aabb)}"
    print(f"annotated into {out_dir} ({state})")
    return 0


def cmd_eval(args) -> int:
    from .reports import evaluate_frames, write_eval_outputs

    scene, field_ = load_checkpoint(args.checkpoint)
    frames, _, _ = load_dataset(args.manifest)
    report = evaluate_frames(scene, field_, frames)
    paths = write_eval_outputs(report, args.report_dir)
    agg = report.aggregate()
    _write_run_json(Path(args.report_dir), "eval",
                    {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest)},
                    args.seed if args.seed is not None else 0)
    print(f"evaluated {agg['n_frames']} frames: PSNR {agg['psnr']['mean']:.2f} dB, "
          f"SSIM {agg['ssim']['mean']:.4f} -> {paths['csv']}")
    return 0


# --- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kinsplat",
        description="Kinematics-conditioned deformable Gaussian splatting.")
    parser.add_argument("--version", action="version", version=f"kinsplat {__version__}")
    parser.add_argument("--seed", type=int, default=None, help="global RNG seed")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker thread cap (best effort)")
    parser.add_argument("--config", default=None, help="TOML/JSON config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-dataset", help="generate a synthetic dataset")
    p.add_argument("spec", help="SyntheticSceneSpec JSON path, or - for stdin")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth_dataset)

    p = sub.add_parser("train", help="train scene + deformation field")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--iters", type=int, default=None, help="override max_iters")
    p.add_argument("--field-depth", type=int, default=12)
    p.add_argument("--field-width", type=int, default=256)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted config override, e.g. phase1.P_di=300")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a novel state from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("out")
    p.add_argument("--pose", type=float, nargs=8, required=True,
                   metavar=("TX", "TY", "TZ", "QW", "QX", "QY", "QZ", "JAW"))
    p.add_argument("--camera", required=True, help="camera JSON (inline or path)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("annotate", help="instrument mask + boxes for a state")
    p.add_argument("checkpoint")
    p.add_argument("out_dir")
    p.add_argument("--pose", type=float, nargs=8, default=None)
    p.add_argument("--camera", default=None, help="camera JSON (inline or path)")
    p.add_argument("--manifest", default=None, help="annotate every frame of a manifest")
    p.add_argument("--name", default="frame_0000", help="output name stem")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("eval", help="PSNR/SSIM report over a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("report_dir")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    _apply_threads(args.threads)
    try:
        return args.func(args)
    except Exception as exc:  # surface everything as exit 1 with a message
        log.error("%s", exc, exc_info=args.verbose)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
