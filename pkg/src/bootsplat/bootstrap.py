"""Novel-view bootstrapping: perturbed views, regeneration, hybrid loss.

The training-time pipeline that distinguishes this trainer from plain
Gaussian splatting: during scheduled 1000-iteration spans, each training
camera is joined by its trajectory neighbors, every one of those cameras
is jittered into variant views, the current model's renders of the
variants are partially regenerated by a diffusion engine, and the cached
regenerations supervise a hybrid loss

    L = (1 - lambda) * L_photo + (lambda / N) * sum_i |I_n^i - I_d^i|

where the per-variant term is the mean absolute error between the
*current* render of the variant view and its stored regeneration.
Outside the scheduled spans the bootstrap term is exactly absent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import image_io
from .diffusion import (DiffusionSchedule, PredictorFailure, RegenRequest,
                        RemotePredictor, regenerate)
from .metrics import gaussian_blur
from .scene import Camera

log = logging.getLogger(__name__)

DEFAULT_QVEC_NOISE = 0.1
DEFAULT_TVEC_NOISE = 0.2
DEFAULT_INTERVALS = (6000, 9000, 15000, 18000, 21000, 24000, 27000, 29000)
UPSCALE_EXTRA_VIEWS = 2


@dataclass(frozen=True)
class ViewVariantPolicy:
    """How variant views are derived from training cameras."""

    mode: str = "random"  # "random" | "consecutive"
    qvec_noise_scale: float = DEFAULT_QVEC_NOISE
    tvec_noise_scale: float = DEFAULT_TVEC_NOISE
    variants_per_camera: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("random", "consecutive"):
            raise ValueError(f"unknown variant mode: {self.mode!r}")
        if self.qvec_noise_scale < 0 or self.tvec_noise_scale < 0:
            raise ValueError("noise scales must be >= 0")
        if self.variants_per_camera < 1:
            raise ValueError("variants_per_camera must be >= 1")


@dataclass(frozen=True)
class BootstrapSchedule:
    """When bootstrapping runs and with what weights and strengths.

    Each interval spans ``interval_length`` iterations starting at the
    listed iteration. ``lambda`` is piecewise within an interval (a
    stronger pull first, then a lighter one); the regeneration strength
    ramps linearly across the interval *indices* from ``s_r_start`` to
    ``s_r_end`` (regenerations are cached per interval, so a within-
    interval ramp would never be sampled).
    """

    intervals: tuple[int, ...] = DEFAULT_INTERVALS
    interval_length: int = 1000
    lambda_early: float = 0.15
    lambda_late: float = 0.05
    lambda_switch: int = 500
    s_r_start: float = 0.05
    s_r_end: float = 0.01
    sampler_steps: int = 100

    def __post_init__(self):
        starts = self.intervals
        if any(starts[i + 1] < starts[i] + self.interval_length
               for i in range(len(starts) - 1)):
            raise ValueError("intervals must be sorted and non-overlapping")
        for lam in (self.lambda_early, self.lambda_late):
            if not 0.0 < lam < 1.0:
                raise ValueError("lambda weights must lie in (0, 1)")
        for s in (self.s_r_start, self.s_r_end):
            if not 0.0 <= s <= 1.0:
                raise ValueError("strengths must lie in [0, 1]")
        if not 0 <= self.lambda_switch <= self.interval_length:
            raise ValueError("lambda_switch must lie within the interval")

    def interval_index(self, iteration: int) -> int:
        """Index of the interval containing ``iteration``, else -1."""
        for idx, start in enumerate(self.intervals):
            if start <= iteration < start + self.interval_length:
                return idx
        return -1

    def is_active(self, iteration: int) -> bool:
        return self.interval_index(iteration) >= 0

    def lambda_at(self, iteration: int) -> float:
        idx = self.interval_index(iteration)
        if idx < 0:
            return 0.0
        offset = iteration - self.intervals[idx]
        return self.lambda_early if offset < self.lambda_switch else self.lambda_late

    def s_r_for_interval(self, index: int) -> float:
        count = len(self.intervals)
        if count <= 1:
            return self.s_r_start
        frac = index / (count - 1)
        return self.s_r_start + (self.s_r_end - self.s_r_start) * frac


@dataclass(frozen=True)
class UpscaleConfig:
    """Settings for the detail-restoring upscale regeneration path."""

    enabled: bool = False
    iter_start: int = 6000
    iter_end: int = 18000
    blur_sigma: float = 3.0
    downscale_factor: int = 3
    upscale_factor: int = 4

    def active_for_interval(self, interval_start: int) -> bool:
        return self.enabled and self.iter_start <= interval_start <= self.iter_end


@dataclass
class BootstrapBatch:
    """One anchor camera's variant views and their regeneration targets."""

    anchor: int
    neighbors: list[int]
    variant_cameras: list[Camera]
    rendered: list[np.ndarray] = field(default_factory=list)
    regenerated: list[np.ndarray] = field(default_factory=list)
    targets: list[np.ndarray] = field(default_factory=list)
    upscale_count: int = 0
    failed: bool = False

    @property
    def num_variants(self) -> int:
        return len(self.variant_cameras)


def perturb_camera(cam: Camera, policy: ViewVariantPolicy,
                   rng: np.random.Generator, *, next_cam: Camera | None = None,
                   fraction: float | None = None) -> Camera:
    """Derive one variant view from a training camera.

    Random mode adds Gaussian noise to the rotation quaternion (then
    renormalizes) and to the translation. Consecutive mode interpolates
    pose linearly toward ``next_cam`` at ``fraction`` (1.0 lands on the
    neighbor's pose exactly); with no neighbor available the camera is
    returned unchanged.
    """
    qvec = cam.extrinsics.qvec
    tvec = cam.extrinsics.tvec
    if policy.mode == "random":
        new_q = qvec + policy.qvec_noise_scale * rng.standard_normal(4)
        new_t = tvec + policy.tvec_noise_scale * rng.standard_normal(3)
    else:
        if next_cam is None:
            return cam.with_pose(qvec, tvec)
        if fraction is None:
            raise ValueError("consecutive mode needs an interpolation fraction")
        q_next = next_cam.extrinsics.qvec
        # Interpolate between equivalent hemisphere representatives.
        if float(np.dot(qvec, q_next)) < 0.0:
            q_next = -q_next
        new_q = (1.0 - fraction) * qvec + fraction * q_next
        new_t = (1.0 - fraction) * tvec + fraction * next_cam.extrinsics.tvec
    return cam.with_pose(new_q, new_t)


def build_batch(anchor_index: int, cameras: list[Camera],
                policy: ViewVariantPolicy, rng: np.random.Generator) -> BootstrapBatch:
    """Variant views for an anchor camera and its trajectory neighbors.

    Neighbors are the adjacent cameras in trajectory order (at most one
    on each side), so N = (1 + #neighbors) * variants_per_camera.
    Consecutive-mode fractions are evenly spaced strictly inside the
    segment toward the next camera: j / (v + 1) for j = 1..v.
    """
    indices = [anchor_index]
    if anchor_index - 1 >= 0:
        indices.append(anchor_index - 1)
    if anchor_index + 1 < len(cameras):
        indices.append(anchor_index + 1)
    neighbors = indices[1:]

    variants: list[Camera] = []
    v = policy.variants_per_camera
    for cam_idx in indices:
        cam = cameras[cam_idx]
        if policy.mode == "consecutive":
            nxt = cam_idx + 1 if cam_idx + 1 < len(cameras) else cam_idx - 1
            next_cam = cameras[nxt] if 0 <= nxt < len(cameras) else None
            for j in range(1, v + 1):
                variants.append(perturb_camera(cam, policy, rng,
                                               next_cam=next_cam,
                                               fraction=j / (v + 1)))
        else:
            for _ in range(v):
                variants.append(perturb_camera(cam, policy, rng))
    return BootstrapBatch(anchor=anchor_index, neighbors=neighbors,
                          variant_cameras=variants)


def hybrid_loss(l_o: float, l_b_terms: list[float] | np.ndarray,
                lambda_boot: float) -> float:
    """(1 - lambda) * L_o + (lambda / N) * sum(L_b)."""
    terms = np.asarray(l_b_terms, dtype=np.float64)
    if terms.size == 0:
        return float((1.0 - lambda_boot) * l_o)
    return float((1.0 - lambda_boot) * l_o
                 + (lambda_boot / terms.size) * terms.sum())


def variant_l1(render: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its gradient w.r.t. the render."""
    diff = render - target
    value = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return value, grad


def bootstrap_loss(batch: BootstrapBatch, renders: list[np.ndarray],
                   lambda_boot: float, l_o: float) -> float:
    """Hybrid loss for one batch given current renders of its variants."""
    if lambda_boot == 0.0 or batch.failed:
        return float(l_o)
    targets = batch.targets if batch.targets else batch.regenerated
    terms = [variant_l1(render, target)[0]
             for render, target in zip(renders, targets)]
    return hybrid_loss(l_o, terms, lambda_boot)


# ---------------------------------------------------------------------------
# Regeneration of cached targets


def regenerate_view(image: np.ndarray, camera: Camera, req: RegenRequest,
                    predictor, schedule: DiffusionSchedule) -> np.ndarray:
    """Regenerate one rendered view.

    Predictors exposing ``regenerate_view(image, camera, request)`` take
    the whole job (view-aware regenerators). ``RemotePredictor`` and
    plain noise predictors go through the DDIM engine.
    """
    hook = getattr(predictor, "regenerate_view", None)
    if hook is not None:
        return hook(image, camera, req)
    return regenerate(req, predictor, schedule)


def upscale_regenerate(image: np.ndarray, predictor,
                       schedule: DiffusionSchedule, *, strength: float,
                       seed: int, steps: int = 100,
                       camera: Camera | None = None,
                       cfg: UpscaleConfig = UpscaleConfig()) -> np.ndarray:
    """Detail-restoring regeneration: regenerate, blur (sigma 3), bilinear
    downscale by 3, upscale by 4 (remote model when available, bicubic
    otherwise), and resize back to the original resolution."""
    height, width = image.shape[:2]
    req = RegenRequest(image=image, strength=strength, steps=steps, seed=seed)
    regen = regenerate_view(image, camera, req, predictor, schedule)
    blurred = gaussian_blur(regen, cfg.blur_sigma)
    small_w = max(1, int(round(width / cfg.downscale_factor)))
    small_h = max(1, int(round(height / cfg.downscale_factor)))
    small = image_io.resize(blurred, small_w, small_h, method="bilinear")
    if isinstance(predictor, RemotePredictor):
        up_req = RegenRequest(image=small, strength=strength, steps=steps,
                              seed=seed, upscale=True)
        big = predictor.regenerate(up_req)
    else:
        big = image_io.resize(small, small_w * cfg.upscale_factor,
                              small_h * cfg.upscale_factor, method="bicubic")
    out = image_io.resize(big, width, height, method="bilinear")
    return np.clip(out, 0.0, 1.0)


def assemble_n8_batch(batch: BootstrapBatch, cameras: list[Camera],
                      policy: ViewVariantPolicy, rng: np.random.Generator,
                      upscale_on: bool) -> BootstrapBatch:
    """Append the two upscale-path variant views when the path is active."""
    if not upscale_on:
        return batch
    anchor_cam = cameras[batch.anchor]
    extra = [perturb_camera(anchor_cam, replace(policy, mode="random"), rng)
             for _ in range(UPSCALE_EXTRA_VIEWS)]
    batch.variant_cameras = batch.variant_cameras + extra
    batch.upscale_count = UPSCALE_EXTRA_VIEWS
    return batch


# ---------------------------------------------------------------------------
# Overlap averaging via depth-tested reprojection


def bilinear_sample(image: np.ndarray, u: np.ndarray,
                    v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample an image at continuous pixel coords (centers at +0.5).

    Returns (samples, in_bounds); out-of-bounds samples are zero.
    """
    height, width = image.shape[:2]
    x = u - 0.5
    y = v - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    valid = (x0 >= 0) & (x0 + 1 <= width - 1) & (y0 >= 0) & (y0 + 1 <= height - 1)
    x0c = np.clip(x0, 0, width - 2)
    y0c = np.clip(y0, 0, height - 2)
    extra = image.ndim - 2
    fx = fx.reshape(fx.shape + (1,) * extra)
    fy = fy.reshape(fy.shape + (1,) * extra)
    p00 = image[y0c, x0c]
    p01 = image[y0c, x0c + 1]
    p10 = image[y0c + 1, x0c]
    p11 = image[y0c + 1, x0c + 1]
    top = p00 * (1.0 - fx) + p01 * fx
    bot = p10 * (1.0 - fx) + p11 * fx
    out = top * (1.0 - fy) + bot * fy
    out[~valid] = 0.0
    return out, valid


def reproject_target(dst_camera: Camera, dst_depth: np.ndarray,
                     dst_mask: np.ndarray, src_camera: Camera,
                     src_image: np.ndarray, src_depth: np.ndarray,
                     src_mask: np.ndarray,
                     depth_rel_tol: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Warp ``src_image`` into the destination view through geometry.

    Destination pixels with rendered depth are unprojected, re-projected
    into the source view, and bilinearly sampled; samples must land on
    rendered source geometry at a consistent depth (occlusion test).
    Returns (warped image, validity mask).
    """
    height, width = dst_depth.shape
    ys, xs = np.mgrid[0:height, 0:width]
    u = xs + 0.5
    v = ys + 0.5
    z = dst_depth
    intr = dst_camera.intrinsics
    x_cam = (u - intr.cx) / intr.fx * z
    y_cam = (v - intr.cy) / intr.fy * z
    p_cam = np.stack([x_cam, y_cam, z], axis=-1)
    rot = dst_camera.extrinsics.rotation_matrix()
    world = (p_cam - dst_camera.extrinsics.tvec) @ rot  # R^T (p - t), batched

    s_rot = src_camera.extrinsics.rotation_matrix()
    p_src = world @ s_rot.T + src_camera.extrinsics.tvec
    z_src = p_src[..., 2]
    front = z_src > 1e-9
    z_safe = np.where(front, z_src, 1.0)
    s_intr = src_camera.intrinsics
    u_src = s_intr.fx * p_src[..., 0] / z_safe + s_intr.cx
    v_src = s_intr.fy * p_src[..., 1] / z_safe + s_intr.cy

    warped, in_bounds = bilinear_sample(src_image, u_src, v_src)
    depth_s, _ = bilinear_sample(src_depth, u_src, v_src)
    mask_s, _ = bilinear_sample(src_mask.astype(np.float64), u_src, v_src)
    depth_ok = np.abs(depth_s - z_src) <= depth_rel_tol * np.maximum(z_src, 1e-9)
    valid = dst_mask & front & in_bounds & (mask_s > 0.999) & depth_ok
    return warped, valid


def average_overlap_targets(batch: BootstrapBatch, depths: list[np.ndarray],
                            masks: list[np.ndarray],
                            depth_rel_tol: float = 0.05) -> None:
    """Replace each variant's target with the pixel-wise mean of every
    variant regeneration observing the same surface point.

    ``depths``/``masks`` come from the interval-start renders (expected
    depth and coverage). Where no other variant sees a pixel the target
    is unchanged.
    """
    n = batch.num_variants
    averaged: list[np.ndarray] = []
    for i in range(n):
        acc = batch.regenerated[i].copy()
        cnt = np.ones(acc.shape[:2])
        for j in range(n):
            if j == i:
                continue
            warped, valid = reproject_target(
                batch.variant_cameras[i], depths[i], masks[i],
                batch.variant_cameras[j], batch.regenerated[j], depths[j],
                masks[j], depth_rel_tol)
            acc[valid] += warped[valid]
            cnt[valid] += 1.0
        averaged.append(acc / cnt[:, :, None])
    batch.targets = averaged


# ---------------------------------------------------------------------------
# Per-interval cache


def build_interval_cache(batches: list[BootstrapBatch], render_fn,
                         predictor, schedule: DiffusionSchedule, *,
                         strength: float, steps: int,
                         seed_rng: np.random.Generator,
                         upscale_cfg: UpscaleConfig | None = None,
                         upscale_active: bool = False,
                         overlap_averaging: bool = False) -> int:
    """Render and regenerate every batch's variants once, filling caches.

    ``render_fn(camera) -> RenderOutput`` renders the current model. A
    ``PredictorFailure`` marks that batch failed (it trains with the
    bootstrap weight dropped to zero) and the loop continues; the number
    of successful regenerations is returned.
    """
    upscale_cfg = upscale_cfg or UpscaleConfig()
    count = 0
    for batch in batches:
        batch.rendered = []
        batch.regenerated = []
        batch.targets = []
        batch.failed = False
        depths: list[np.ndarray] = []
        masks: list[np.ndarray] = []
        try:
            for k, cam in enumerate(batch.variant_cameras):
                out = render_fn(cam)
                image = np.clip(out.image, 0.0, 1.0)
                batch.rendered.append(image)
                depths.append(out.expected_depth())
                masks.append(out.alpha_map > 0.5)
                seed = int(seed_rng.integers(0, 2 ** 63 - 1))
                is_upscale = (upscale_active
                              and k >= batch.num_variants - batch.upscale_count)
                if is_upscale:
                    regen = upscale_regenerate(
                        image, predictor, schedule, strength=strength,
                        seed=seed, steps=steps, camera=cam, cfg=upscale_cfg)
                else:
                    req = RegenRequest(image=image, strength=strength,
                                       steps=steps, seed=seed)
                    regen = regenerate_view(image, cam, req, predictor, schedule)
                batch.regenerated.append(np.asarray(regen, dtype=np.float64))
                count += 1
        except PredictorFailure as exc:
            batch.failed = True
            count -= len(batch.regenerated)
            log.warning("regeneration failed for anchor %d; batch falls back "
                        "to photometric-only loss this interval: %s",
                        batch.anchor, exc)
            continue
        if overlap_averaging:
            average_overlap_targets(batch, depths, masks)
    return count
