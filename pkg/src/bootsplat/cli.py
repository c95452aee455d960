"""Command-line entry point.

Subcommands
-----------
train              optimize a Gaussian cloud on a COLMAP scene directory
render             render one camera from a checkpoint to a PNG
eval               PSNR/SSIM report for a checkpoint against a scene
bootstrap-preview  render a perturbed view and its regeneration side by side
make-toy-scene     synthesize a ring-camera scene (COLMAP layout + images)

Exit codes: 0 success, 2 usage or input error, 3 regeneration-service
failure with fallback disabled.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import image_io
from .bootstrap import ViewVariantPolicy, perturb_camera
from .colmap_io import CameraExtrinsics, CameraIntrinsics, PINHOLE
from .config import RunConfig, ServiceSection, load_config, preset
from .diffusion import (BlurSharpenHeuristic, PredictorFailure, RegenRequest,
                        RemotePredictor, make_schedule, regenerate)
from .gaussian_core import load_checkpoint, save_checkpoint
from .metrics import MetricReport, psnr, ssim
from .rasterizer import render as render_cloud
from .scene import Camera, load_scene, write_scene
from .trainer import Trainer
from .toy import make_toy_scene

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SERVICE = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bootsplat",
        description="Gaussian-splatting trainer with diffusion-based "
                    "novel-view bootstrapping")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on a scene directory")
    p_train.add_argument("--scene", required=True, help="COLMAP scene dir")
    p_train.add_argument("--config", help="YAML config file")
    p_train.add_argument("--preset", choices=["baseline", "v1", "v3", "v4"],
                         help="named config preset (applied before --config)")
    p_train.add_argument("--iters", type=int, help="override iteration count")
    p_train.add_argument("--seed", type=int, help="override run seed")
    p_train.add_argument("--out", help="output dir (default runs/<scene>)")

    p_render = sub.add_parser("render", help="render a camera from a checkpoint")
    p_render.add_argument("--checkpoint", required=True)
    p_render.add_argument("--camera", required=True,
                          help="camera index into --scene, or a spec "
                               "'W,H,fx,fy,cx,cy,qw,qx,qy,qz,tx,ty,tz'")
    p_render.add_argument("--scene", help="scene dir providing cameras")
    p_render.add_argument("--out", required=True, help="output PNG path")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a scene")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--scene", required=True)
    p_eval.add_argument("--holdout-every", type=int, default=8)
    p_eval.add_argument("--out", help="write the JSON report here (else stdout)")

    p_prev = sub.add_parser("bootstrap-preview",
                            help="write a perturbed render and its regeneration")
    p_prev.add_argument("--checkpoint", required=True)
    p_prev.add_argument("--scene", required=True)
    p_prev.add_argument("--camera", type=int, required=True,
                        help="camera index to perturb")
    p_prev.add_argument("--s_r", type=float, default=0.05,
                        help="regeneration strength")
    p_prev.add_argument("--seed", type=int, default=0)
    p_prev.add_argument("--service-url",
                        help="regeneration service URL (default: local heuristic; "
                             "BOOTSPLAT_SERVICE_URL also applies)")
    p_prev.add_argument("--out", required=True, help="output directory")

    p_toy = sub.add_parser("make-toy-scene",
                           help="synthesize a ring-camera scene on disk")
    p_toy.add_argument("--out", required=True, help="scene directory to create")
    p_toy.add_argument("--gaussians", type=int, default=120)
    p_toy.add_argument("--cameras", type=int, default=24)
    p_toy.add_argument("--size", type=int, default=64, help="image side length")
    p_toy.add_argument("--seed", type=int, default=0)
    return parser


def _parse_camera_spec(spec: str) -> Camera:
    parts = [float(v) for v in spec.split(",")]
    if len(parts) != 13:
        raise ValueError("camera spec needs 13 numbers: "
                         "W,H,fx,fy,cx,cy,qw,qx,qy,qz,tx,ty,tz")
    width, height = int(parts[0]), int(parts[1])
    intr = CameraIntrinsics(camera_id=1, model_id=PINHOLE, width=width,
                            height=height, params=np.array(parts[2:6]))
    extr = CameraExtrinsics(qvec=np.array(parts[6:10]), tvec=np.array(parts[10:13]))
    return Camera(intr, extr, name="spec")


def _cmd_train(args) -> int:
    cfg = preset(args.preset) if args.preset else RunConfig()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    if args.iters is not None:
        cfg = dataclasses.replace(cfg, iterations=args.iters)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    scene = load_scene(args.scene)
    if not scene.images:
        raise FileNotFoundError(f"{args.scene} has no usable images/ folder")
    out_dir = Path(args.out) if args.out else Path("runs") / scene.name
    trainer = Trainer(scene, cfg, out_dir=out_dir)
    result = trainer.train()
    print(f"trained {cfg.iterations} iterations on {scene.name}: "
          f"PSNR {result.report.psnr:.3f} dB, SSIM {result.report.ssim:.4f} "
          f"({trainer.cloud.num_points} points) -> {out_dir}")
    return EXIT_OK


def _cmd_render(args) -> int:
    cloud = load_checkpoint(args.checkpoint)
    if args.scene:
        scene = load_scene(args.scene, load_images=False)
        try:
            camera = scene.cameras[int(args.camera)]
        except (ValueError, IndexError) as exc:
            raise ValueError(f"bad camera index {args.camera!r} for scene with "
                             f"{len(scene.cameras)} cameras") from exc
    else:
        camera = _parse_camera_spec(args.camera)
    out = render_cloud(cloud, camera)
    image_io.save_image(np.clip(out.image, 0.0, 1.0), args.out)
    print(f"rendered {camera.name} -> {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cloud = load_checkpoint(args.checkpoint)
    scene = load_scene(args.scene)
    _, test_idx = scene.split(args.holdout_every)
    indices = test_idx or list(range(len(scene.cameras)))
    report = MetricReport(scene=scene.name, iteration=0, psnr=0.0, ssim=0.0)
    psnrs, ssims = [], []
    for idx in indices:
        camera = scene.cameras[idx]
        if camera.name not in scene.images:
            continue
        out = render_cloud(cloud, camera)
        gt = scene.images[camera.name]
        p = psnr(out.image, gt)
        s = ssim(out.image, gt)
        report.add_image(camera.name, p, s)
        psnrs.append(p)
        ssims.append(s)
    if not psnrs:
        raise FileNotFoundError(f"{args.scene} has no evaluation images")
    report.psnr = float(np.mean(psnrs))
    report.ssim = float(np.mean(ssims))
    payload = report.to_json()
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(payload)
    return EXIT_OK


def _cmd_bootstrap_preview(args) -> int:
    cloud = load_checkpoint(args.checkpoint)
    scene = load_scene(args.scene, load_images=False)
    try:
        camera = scene.cameras[args.camera]
    except IndexError as exc:
        raise ValueError(f"camera index {args.camera} out of range "
                         f"({len(scene.cameras)} cameras)") from exc
    policy = ViewVariantPolicy(mode="random", seed=args.seed)
    rng = np.random.default_rng(args.seed)
    variant = perturb_camera(camera, policy, rng)
    before = np.clip(render_cloud(cloud, variant).image, 0.0, 1.0)

    schedule = make_schedule()
    url = ServiceSection(url=args.service_url).resolved_url()
    predictor = (RemotePredictor(url) if url else BlurSharpenHeuristic(schedule))
    req = RegenRequest(image=before, strength=args.s_r, seed=args.seed)
    after = regenerate(req, predictor, schedule)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_io.save_image(before, out_dir / "before.png")
    image_io.save_image(after, out_dir / "after.png")
    print(f"wrote {out_dir / 'before.png'} and {out_dir / 'after.png'} "
          f"(strength {args.s_r})")
    return EXIT_OK


def _cmd_make_toy_scene(args) -> int:
    scene, gt_cloud = make_toy_scene(num_gaussians=args.gaussians,
                                     num_cameras=args.cameras,
                                     image_size=args.size, seed=args.seed)
    out_dir = Path(args.out)
    write_scene(scene, out_dir, fmt="binary")
    save_checkpoint(gt_cloud, out_dir / "ground_truth.bsplat")
    print(f"wrote toy scene ({args.cameras} cameras, {args.gaussians} gaussians) "
          f"to {out_dir}")
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "bootstrap-preview": _cmd_bootstrap_preview,
    "make-toy-scene": _cmd_make_toy_scene,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except PredictorFailure as exc:
        print(f"error: regeneration service failed: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
