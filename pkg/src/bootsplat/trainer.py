"""Training loop: photometric optimization, densification, bootstrapping.

One ``Trainer`` owns the Gaussian cloud, its Adam state, the gradient
accumulator, and the bootstrap caches, and advances them iteration by
iteration. Randomness is split into independent streams (densify
sampling, view perturbation, regeneration seeds) spawned from the run
seed, so disabling bootstrapping — or giving it an empty interval list —
leaves the remaining streams untouched and the run bitwise reproducible
against a plain baseline.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bootstrap as boot
from .config import RunConfig
from .diffusion import (BlurSharpenHeuristic, PredictorFailure, RemotePredictor,
                        ZeroPredictor, make_schedule)
from .gaussian_core import GaussianCloud, init_from_sfm, save_checkpoint
from .metrics import MetricReport, psnr, ssim, ssim_with_grad
from .optimizer import (Action, AdamOptimizer, DensifyConfig, GradAccumulator,
                        LearningRates, apply_actions, densify_decision,
                        reset_opacity)
from .rasterizer import R2_CUTOFF, project, rasterize, rasterize_backward
from .scene import Camera, Scene

log = logging.getLogger(__name__)


def photometric_loss(render: np.ndarray, gt: np.ndarray,
                     l1_weight: float = 0.8,
                     dssim_weight: float = 0.2) -> tuple[float, np.ndarray]:
    """w1 * L1 + w2 * (1 - SSIM) against ground truth, with gradient."""
    diff = render - gt
    l1 = float(np.mean(np.abs(diff)))
    g_l1 = np.sign(diff) / diff.size
    s_val, g_s = ssim_with_grad(render, gt)
    value = l1_weight * l1 + dssim_weight * (1.0 - s_val)
    grad = l1_weight * g_l1 - dssim_weight * g_s
    return value, grad


def spatial_extent(cameras: list[Camera]) -> float:
    """Radius of the camera rig: max center distance from the centroid."""
    centers = np.stack([cam.center() for cam in cameras])
    centroid = centers.mean(axis=0)
    radius = float(np.max(np.linalg.norm(centers - centroid, axis=1)))
    return max(radius * 1.1, 1e-6)


def dry_run_schedule(schedule: boot.BootstrapSchedule,
                     iterations: int) -> list[dict]:
    """Per-iteration bootstrap activity without training anything.

    One entry per *active* iteration: interval index, the lambda weight
    in force, and the interval's regeneration strength.
    """
    entries = []
    for it in range(iterations):
        idx = schedule.interval_index(it)
        if idx < 0:
            continue
        entries.append({
            "iteration": it,
            "interval_index": idx,
            "lambda": schedule.lambda_at(it),
            "s_r": schedule.s_r_for_interval(idx),
        })
    return entries


def build_predictor(cfg: RunConfig, diffusion_schedule):
    """Instantiate the configured regeneration predictor."""
    kind = cfg.bootstrap.predictor
    if kind == "heuristic":
        return BlurSharpenHeuristic(diffusion_schedule)
    if kind == "zero":
        return ZeroPredictor()
    if kind == "remote":
        url = cfg.bootstrap.service.resolved_url()
        if not url:
            raise ValueError("remote predictor requires a service url "
                             "(config bootstrap.service.url or the "
                             "BOOTSPLAT_SERVICE_URL environment variable)")
        return RemotePredictor(url, timeout=cfg.bootstrap.service.timeout)
    raise ValueError(f"unknown predictor kind {cfg.bootstrap.predictor!r}")


@dataclass
class TrainResult:
    cloud: GaussianCloud
    events: list[dict]
    losses: list[float]
    report: MetricReport | None = None


@dataclass
class _BootstrapRuntime:
    schedule: boot.BootstrapSchedule
    policy: boot.ViewVariantPolicy
    upscale: boot.UpscaleConfig
    predictor: object = None
    batches: dict[int, boot.BootstrapBatch] = field(default_factory=dict)


class Trainer:
    """Drives one training run over a loaded scene."""

    def __init__(self, scene: Scene, cfg: RunConfig,
                 out_dir: str | Path | None = None,
                 predictor=None):
        if not scene.cameras:
            raise ValueError("scene has no cameras")
        self.scene = scene
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.train_idx, self.test_idx = scene.split(cfg.holdout_every)

        self.extent = spatial_extent(scene.cameras)
        self.cloud = init_from_sfm(scene.points, with_sh=cfg.with_sh)
        rates = LearningRates(
            position_init=cfg.lr.position_init,
            position_final=cfg.lr.position_final,
            position_max_steps=cfg.lr.position_max_steps,
            rotation=cfg.lr.rotation, log_scale=cfg.lr.log_scale,
            opacity=cfg.lr.opacity, color=cfg.lr.color, sh1=cfg.lr.sh1,
            spatial_scale=self.extent)
        self.optimizer = AdamOptimizer(self.cloud, rates)
        self.accumulator = GradAccumulator(self.cloud.num_points)
        self.densify_cfg = DensifyConfig(
            clone_grad_threshold=cfg.densify.clone_grad_threshold,
            split_scale_threshold=cfg.densify.split_scale_frac * self.extent,
            densify_interval=cfg.densify.densify_interval,
            opacity_reset_interval=cfg.densify.opacity_reset_interval,
            prune_alpha=cfg.densify.prune_alpha,
            direction_consistency_ratio=cfg.densify.direction_consistency_ratio)

        root = np.random.SeedSequence(cfg.seed)
        densify_ss, shuffle_ss, boot_ss, regen_ss = root.spawn(4)
        self.densify_rng = np.random.default_rng(densify_ss)
        self.shuffle_rng = np.random.default_rng(shuffle_ss)
        self.bootstrap_rng = np.random.default_rng(boot_ss)
        self.regen_rng = np.random.default_rng(regen_ss)

        self.diffusion_schedule = make_schedule(
            num_train_steps=cfg.diffusion.train_steps,
            beta_start=cfg.diffusion.beta_start,
            beta_end=cfg.diffusion.beta_end,
            sampler_steps=cfg.bootstrap.sampler_steps)

        self._boot: _BootstrapRuntime | None = None
        if cfg.bootstrap.enabled and cfg.bootstrap.intervals:
            lam_early, lam_late = cfg.bootstrap.lambda_boot_schedule
            self._boot = _BootstrapRuntime(
                schedule=boot.BootstrapSchedule(
                    intervals=tuple(cfg.bootstrap.intervals),
                    interval_length=cfg.bootstrap.interval_length,
                    lambda_early=lam_early, lambda_late=lam_late,
                    lambda_switch=cfg.bootstrap.lambda_switch,
                    s_r_start=cfg.bootstrap.s_r_start,
                    s_r_end=cfg.bootstrap.s_r_end,
                    sampler_steps=cfg.bootstrap.sampler_steps),
                policy=boot.ViewVariantPolicy(
                    mode=cfg.bootstrap.mode,
                    qvec_noise_scale=cfg.bootstrap.qvec_noise_scale,
                    tvec_noise_scale=cfg.bootstrap.tvec_noise_scale,
                    variants_per_camera=cfg.bootstrap.variants_per_camera,
                    seed=cfg.seed),
                upscale=boot.UpscaleConfig(
                    enabled=cfg.bootstrap.upscale.enabled,
                    iter_start=cfg.bootstrap.upscale.iter_range[0],
                    iter_end=cfg.bootstrap.upscale.iter_range[1],
                    blur_sigma=cfg.bootstrap.upscale.blur_sigma,
                    downscale_factor=cfg.bootstrap.upscale.downscale_factor,
                    upscale_factor=cfg.bootstrap.upscale.upscale_factor),
                predictor=predictor)

        self.events: list[dict] = []
        self.losses: list[float] = []

    # ------------------------------------------------------------------
    # rendering helpers

    def render_camera(self, camera: Camera):
        splats = project(self.cloud, camera)
        out = rasterize(splats, camera.width, camera.height, tile=self.cfg.tile)
        return splats, out

    def _visible_mask(self, splats, width: int, height: int) -> np.ndarray:
        mask = np.zeros(self.cloud.num_points, dtype=bool)
        radius = np.sqrt(R2_CUTOFF)
        rx = radius * np.sqrt(splats.cov2d[:, 0, 0])
        ry = radius * np.sqrt(splats.cov2d[:, 1, 1])
        u = splats.mean2d[:, 0]
        v = splats.mean2d[:, 1]
        on_screen = ((u + rx >= 0) & (u - rx <= width)
                     & (v + ry >= 0) & (v - ry <= height))
        mask[splats.point_id[on_screen]] = True
        return mask

    # ------------------------------------------------------------------
    # bootstrap cache

    def _interval_start_index(self, iteration: int) -> int:
        if self._boot is None:
            return -1
        try:
            return self._boot.schedule.intervals.index(iteration)
        except ValueError:
            return -1

    def _start_interval(self, iteration: int, interval_index: int) -> None:
        rt = self._boot
        if rt.predictor is None:
            rt.predictor = build_predictor(self.cfg, self.diffusion_schedule)
        strength = rt.schedule.s_r_for_interval(interval_index)
        upscale_active = rt.upscale.active_for_interval(iteration)
        rt.batches = {}
        batch_list = []
        cams = self.scene.cameras
        for anchor_pos, cam_idx in enumerate(self.train_idx):
            batch = boot.build_batch(
                anchor_pos, [cams[i] for i in self.train_idx],
                rt.policy, self.bootstrap_rng)
            batch.anchor = cam_idx
            batch = boot.assemble_n8_batch(
                batch, cams, rt.policy, self.bootstrap_rng, upscale_active)
            rt.batches[cam_idx] = batch
            batch_list.append(batch)

        def render_fn(camera: Camera):
            _, out = self.render_camera(camera)
            return out

        count = boot.build_interval_cache(
            batch_list, render_fn, rt.predictor, self.diffusion_schedule,
            strength=strength, steps=rt.schedule.sampler_steps,
            seed_rng=self.regen_rng, upscale_cfg=rt.upscale,
            upscale_active=upscale_active,
            overlap_averaging=self.cfg.bootstrap.overlap_averaging)
        failed = sum(1 for b in batch_list if b.failed)
        if failed and not self.cfg.bootstrap.fallback_on_failure:
            raise PredictorFailure(
                f"{failed} bootstrap batch(es) failed to regenerate and "
                "fallback is disabled")
        self._log_event(iteration, "bootstrap_interval_start",
                        interval_index=interval_index, s_r=strength,
                        regenerated=count, batches=len(batch_list),
                        failed=failed, upscale=upscale_active)

    # ------------------------------------------------------------------
    # one iteration

    def _train_view(self, iteration: int) -> float:
        order_pos = iteration % len(self.train_idx)
        cam_idx = self.train_idx[order_pos]
        camera = self.scene.cameras[cam_idx]
        gt = self.scene.images[camera.name]
        splats, out = self.render_camera(camera)
        l_o, dl = photometric_loss(out.image, gt, self.cfg.loss.l1_weight,
                                   self.cfg.loss.dssim_weight)

        rt = self._boot
        lam = rt.schedule.lambda_at(iteration) if rt is not None else 0.0
        batch = rt.batches.get(cam_idx) if rt is not None else None
        use_boot = lam > 0.0 and batch is not None and not batch.failed

        if use_boot:
            grads = rasterize_backward(splats, out, (1.0 - lam) * dl)
            targets = batch.targets if batch.targets else batch.regenerated
            n = batch.num_variants
            terms = []
            for cam_v, target in zip(batch.variant_cameras, targets):
                splats_v = project(self.cloud, cam_v)
                out_v = rasterize(splats_v, cam_v.width, cam_v.height,
                                  tile=self.cfg.tile)
                lb, glb = boot.variant_l1(out_v.image, target)
                terms.append(lb)
                grads.add_(rasterize_backward(splats_v, out_v,
                                              (lam / n) * glb))
            loss = boot.hybrid_loss(l_o, terms, lam)
        else:
            grads = rasterize_backward(splats, out, dl)
            loss = l_o

        if self.cfg.densify.enabled:
            visible = self._visible_mask(splats, camera.width, camera.height)
            self.accumulator.observe(grads.screen, visible, grads.positions)
        self.optimizer.step(self.cloud, grads, iteration)
        return loss

    # ------------------------------------------------------------------
    # densification events

    def _densify_step(self, iteration: int) -> None:
        dcfg = self.cfg.densify
        if not dcfg.enabled:
            return
        in_window = dcfg.start <= iteration <= dcfg.end
        if in_window and iteration > 0 and iteration % dcfg.densify_interval == 0:
            actions = densify_decision(self.accumulator, self.cloud,
                                       self.densify_cfg)
            if np.any(actions != Action.NONE):
                result = apply_actions(self.cloud, actions, self.accumulator,
                                       self.densify_cfg, self.densify_rng)
                self.cloud = result.cloud
                self.optimizer.remap(result.src_index)
                self._log_event(iteration, "densify",
                                cloned=result.num_cloned,
                                split=result.num_split,
                                pruned=result.num_pruned,
                                points=self.cloud.num_points)
            # Fresh statistics window for the next decision.
            self.accumulator = GradAccumulator(self.cloud.num_points)
        if (iteration > 0 and iteration <= dcfg.end
                and iteration % dcfg.opacity_reset_interval == 0):
            reset_opacity(self.cloud)
            group = self.optimizer._groups.get("opacity_logits")
            if group is not None:
                group.m[:] = 0.0
                group.v[:] = 0.0
            self._log_event(iteration, "opacity_reset")

    # ------------------------------------------------------------------

    def _log_event(self, iteration: int, kind: str, **payload) -> None:
        event = {"iteration": iteration, "kind": kind, **payload}
        self.events.append(event)
        log.info("iter %d: %s %s", iteration, kind,
                 json.dumps(payload, default=float) if payload else "")

    def evaluate(self, iteration: int, save_renders: bool = False) -> MetricReport:
        """PSNR/SSIM over the held-out cameras (train views if none)."""
        indices = self.test_idx or self.train_idx
        report = MetricReport(scene=self.scene.name, iteration=iteration,
                              psnr=0.0, ssim=0.0)
        psnrs, ssims = [], []
        for idx in indices:
            camera = self.scene.cameras[idx]
            _, out = self.render_camera(camera)
            gt = self.scene.images[camera.name]
            p = psnr(out.image, gt)
            s = ssim(out.image, gt)
            report.add_image(camera.name, p, s)
            psnrs.append(p)
            ssims.append(s)
            if save_renders and self.out_dir is not None:
                from . import image_io
                render_dir = self.out_dir / "renders"
                render_dir.mkdir(parents=True, exist_ok=True)
                image_io.save_image(np.clip(out.image, 0.0, 1.0),
                                    render_dir / f"{iteration:06d}_{camera.name}.png")
        report.psnr = float(np.mean(psnrs)) if psnrs else 0.0
        report.ssim = float(np.mean(ssims)) if ssims else 0.0
        return report

    def _write_report(self, report: MetricReport) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"metrics_{report.iteration:06d}.json"
        path.write_text(report.to_json() + "\n", encoding="utf-8")

    def _checkpoint(self, iteration: int) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.cloud, self.out_dir / f"ckpt_{iteration:06d}.bsplat")
        self._log_event(iteration, "checkpoint")

    def train(self, iterations: int | None = None) -> TrainResult:
        total = iterations if iterations is not None else self.cfg.iterations
        for it in range(total):
            idx = self._interval_start_index(it)
            if idx >= 0:
                self._start_interval(it, idx)
            loss = self._train_view(it)
            self.losses.append(loss)
            self._densify_step(it)
            if (it + 1) in self.cfg.checkpoints:
                self._checkpoint(it + 1)
            if (self.cfg.eval_interval and it > 0
                    and it % self.cfg.eval_interval == 0):
                report = self.evaluate(it)
                self._write_report(report)
                self._log_event(it, "eval", psnr=report.psnr, ssim=report.ssim)
        report = self.evaluate(total, save_renders=True)
        self._write_report(report)
        self._log_event(total, "final_eval", psnr=report.psnr, ssim=report.ssim)
        if self.out_dir is not None:
            save_checkpoint(self.cloud, self.out_dir / "final.bsplat")
        return TrainResult(cloud=self.cloud, events=self.events,
                           losses=self.losses, report=report)
