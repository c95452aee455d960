"""Parameter updates and adaptive density control for Gaussian clouds.

``AdamOptimizer`` runs standard Adam with one learning rate per parameter
group (positions get an exponentially decayed rate) and survives
structural edits via ``remap``. ``GradAccumulator`` keeps per-point
running sums of screen-space positional gradients; its direction
consistency ratio ``|sum g| / sum |g|`` separates points whose per-view
gradients agree (under-reconstructed — densify) from points whose
gradients cancel (multi-view tension — leave alone). ``densify_decision``
and ``apply_actions`` implement clone / split / prune on top of that
filter, and ``reset_opacity`` caps opacity periodically so pruning can
reclaim saturated points.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .gaussian_core import GaussianCloud, logit, rotmats_from_quats
from .rasterizer import CloudGradients

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

# Split children are sampled inside the parent with Mahalanobis norm
# clamped below 3 so they stay within the parent's 3-sigma ellipsoid.
SPLIT_SCALE_DIVISOR = 1.6
SPLIT_SAMPLE_MAX_NORM = 2.9
OPACITY_RESET_CEILING = 0.01


@dataclass
class LearningRates:
    """Per-group learning rates; positions decay exponentially."""

    position_init: float = 1.6e-4
    position_final: float = 1.6e-6
    position_max_steps: int = 30_000
    rotation: float = 1e-3
    log_scale: float = 5e-3
    opacity: float = 5e-2
    color: float = 2.5e-3
    sh1: float = 1.25e-4
    # Positions are scaled by the scene extent so step sizes are relative
    # to the reconstruction volume, not absolute units.
    spatial_scale: float = 1.0

    def position_lr(self, iteration: int) -> float:
        if self.position_init <= 0.0:
            return 0.0
        t = min(max(iteration, 0), self.position_max_steps) / self.position_max_steps
        ratio = self.position_final / self.position_init
        return self.spatial_scale * self.position_init * ratio ** t


class _Group:
    __slots__ = ("m", "v", "t")

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0


class AdamOptimizer:
    """Adam over the cloud's parameter groups with structural remapping."""

    GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "colors", "sh1")

    def __init__(self, cloud: GaussianCloud, rates: LearningRates | None = None):
        self.rates = rates or LearningRates()
        self._groups: dict[str, _Group] = {}
        for name in self.GROUPS:
            arr = getattr(cloud, name)
            if arr is not None:
                self._groups[name] = _Group(arr.shape)

    def _lr(self, name: str, iteration: int) -> float:
        if name == "positions":
            return self.rates.position_lr(iteration)
        if name == "rotations":
            return self.rates.rotation
        if name == "log_scales":
            return self.rates.log_scale
        if name == "opacity_logits":
            return self.rates.opacity
        if name == "colors":
            return self.rates.color
        return self.rates.sh1

    def step(self, cloud: GaussianCloud, grads: CloudGradients, iteration: int) -> None:
        """One Adam update in place; rotations are renormalized after."""
        for name, group in self._groups.items():
            g = getattr(grads, name)
            if g is None:
                continue
            lr = self._lr(name, iteration)
            group.t += 1
            group.m = ADAM_BETA1 * group.m + (1.0 - ADAM_BETA1) * g
            group.v = ADAM_BETA2 * group.v + (1.0 - ADAM_BETA2) * g * g
            if lr == 0.0:
                continue
            m_hat = group.m / (1.0 - ADAM_BETA1 ** group.t)
            v_hat = group.v / (1.0 - ADAM_BETA2 ** group.t)
            param = getattr(cloud, name)
            param -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        cloud.normalize_rotations()

    def remap(self, src_index: np.ndarray) -> None:
        """Rebuild moment rows after a structural edit.

        ``src_index[i]`` is the old row feeding new row i, or -1 for a
        fresh point (zero-initialized moments). Step counts carry over.
        """
        fresh = src_index < 0
        keep = np.where(fresh, 0, src_index)
        for group in self._groups.values():
            new_m = group.m[keep].copy()
            new_v = group.v[keep].copy()
            new_m[fresh] = 0.0
            new_v[fresh] = 0.0
            group.m = new_m
            group.v = new_v


def adam_step(cloud: GaussianCloud, grads: CloudGradients, optimizer: AdamOptimizer,
              iteration: int) -> GaussianCloud:
    """Functional wrapper over ``AdamOptimizer.step``."""
    optimizer.step(cloud, grads, iteration)
    return cloud


@dataclass
class DensifyConfig:
    """Thresholds controlling adaptive density control."""

    clone_grad_threshold: float = 2e-4
    split_scale_threshold: float = 0.01  # scene units; scaled by caller
    densify_interval: int = 100
    opacity_reset_interval: int = 3000
    prune_alpha: float = 0.005
    direction_consistency_ratio: float = 0.5

    def __post_init__(self):
        for name in ("clone_grad_threshold", "split_scale_threshold",
                     "densify_interval", "opacity_reset_interval", "prune_alpha",
                     "direction_consistency_ratio"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.direction_consistency_ratio > 1.0:
            raise ValueError("direction_consistency_ratio must be <= 1")


class Action(enum.IntEnum):
    NONE = 0
    CLONE = 1
    SPLIT = 2
    PRUNE = 3


class GradAccumulator:
    """Per-point running sums of positional gradients across views.

    Tracks the screen-space 2-vector sum (direction consistency), the sum
    of magnitudes, the observation count, and the world-space positional
    gradient sum (used to aim clone offsets).
    """

    def __init__(self, num_points: int):
        self.vec_sum = np.zeros((num_points, 2))
        self.mag_sum = np.zeros(num_points)
        self.count = np.zeros(num_points, dtype=np.int64)
        self.pos_sum = np.zeros((num_points, 3))

    @property
    def num_points(self) -> int:
        return self.mag_sum.shape[0]

    def observe(self, screen_grads: np.ndarray, visible: np.ndarray,
                pos_grads: np.ndarray | None = None) -> None:
        """Fold in one view's gradients for the points visible in it."""
        self.vec_sum[visible] += screen_grads[visible]
        self.mag_sum[visible] += np.linalg.norm(screen_grads[visible], axis=1)
        self.count[visible] += 1
        if pos_grads is not None:
            self.pos_sum[visible] += pos_grads[visible]

    def consistency(self) -> np.ndarray:
        """``|sum g| / sum |g|`` per point, in [0, 1]; 0 when unobserved."""
        norms = np.linalg.norm(self.vec_sum, axis=1)
        out = np.zeros(self.num_points)
        seen = self.mag_sum > 0
        out[seen] = norms[seen] / self.mag_sum[seen]
        return np.minimum(out, 1.0)

    def mean_vector_magnitude(self) -> np.ndarray:
        """Magnitude of the accumulated vector averaged over observations."""
        out = np.zeros(self.num_points)
        seen = self.count > 0
        out[seen] = np.linalg.norm(self.vec_sum[seen], axis=1) / self.count[seen]
        return out

    def remap(self, src_index: np.ndarray, affected_old: np.ndarray) -> "GradAccumulator":
        """Carry sums over to a restructured cloud; affected source points
        and fresh points start from zero."""
        new = GradAccumulator(src_index.shape[0])
        carry = (src_index >= 0) & ~affected_old[np.where(src_index < 0, 0, src_index)]
        src = src_index[carry]
        new.vec_sum[carry] = self.vec_sum[src]
        new.mag_sum[carry] = self.mag_sum[src]
        new.count[carry] = self.count[src]
        new.pos_sum[carry] = self.pos_sum[src]
        return new


def accumulate(acc: GradAccumulator, screen_grad: np.ndarray, point: int = 0,
               pos_grad: np.ndarray | None = None) -> GradAccumulator:
    """Record one observation of one point (batch form: ``observe``)."""
    g = np.asarray(screen_grad, dtype=np.float64)
    acc.vec_sum[point] += g
    acc.mag_sum[point] += float(np.linalg.norm(g))
    acc.count[point] += 1
    if pos_grad is not None:
        acc.pos_sum[point] += np.asarray(pos_grad, dtype=np.float64)
    return acc


def densify_decision(acc: GradAccumulator, cloud: GaussianCloud,
                     cfg: DensifyConfig) -> np.ndarray:
    """Per-point action: prune wins; otherwise the gradient gate (mean
    accumulated vector magnitude over threshold AND direction consistency
    over ratio) routes to clone (small points) or split (large points)."""
    actions = np.full(cloud.num_points, Action.NONE, dtype=np.int64)
    alphas = cloud.opacities()
    actions[alphas < cfg.prune_alpha] = Action.PRUNE

    grad_gate = ((acc.mean_vector_magnitude() > cfg.clone_grad_threshold)
                 & (acc.consistency() >= cfg.direction_consistency_ratio))
    max_scale = np.max(cloud.scales(), axis=1)
    undecided = actions == Action.NONE
    actions[undecided & grad_gate & (max_scale < cfg.split_scale_threshold)] = Action.CLONE
    actions[undecided & grad_gate & (max_scale >= cfg.split_scale_threshold)] = Action.SPLIT
    return actions


@dataclass
class ActionResult:
    """Restructured cloud plus the row provenance needed to remap
    optimizer moments and accumulators."""

    cloud: GaussianCloud
    src_index: np.ndarray     # (P',) old row per new row; -1 for fresh rows
    affected_old: np.ndarray  # (P,) bool: old rows touched by any action
    num_cloned: int
    num_split: int
    num_pruned: int


def apply_actions(cloud: GaussianCloud, actions: np.ndarray,
                  acc: GradAccumulator, cfg: DensifyConfig,
                  rng: np.random.Generator) -> ActionResult:
    """Clone, split, and prune in one pass.

    Clones duplicate the point nudged along the accumulated descent
    direction (negative world-space gradient sum) by half its largest
    scale. Splits replace the parent with two children at scale / 1.6
    sampled inside the parent ellipsoid. Order of surviving rows:
    kept originals, then clones, then split children.
    """
    actions = np.asarray(actions)
    keep = (actions == Action.NONE) | (actions == Action.CLONE)
    clone_ids = np.nonzero(actions == Action.CLONE)[0]
    split_ids = np.nonzero(actions == Action.SPLIT)[0]
    prune_ids = np.nonzero(actions == Action.PRUNE)[0]

    parts: list[GaussianCloud] = []
    srcs: list[np.ndarray] = []

    kept_ids = np.nonzero(keep)[0]
    if kept_ids.size:
        parts.append(cloud.subset(kept_ids))
        srcs.append(kept_ids.astype(np.int64))

    if clone_ids.size:
        clones = cloud.subset(clone_ids)
        direction = -acc.pos_sum[clone_ids]
        norms = np.linalg.norm(direction, axis=1, keepdims=True)
        unit = np.where(norms > 0, direction / np.maximum(norms, 1e-30), 0.0)
        step = 0.5 * np.max(clones.scales(), axis=1, keepdims=True)
        clones.positions = clones.positions + unit * step
        parts.append(clones)
        srcs.append(np.full(clone_ids.size, -1, dtype=np.int64))

    if split_ids.size:
        parents = cloud.subset(split_ids)
        children = parents.concat(parents)
        z = rng.standard_normal((children.num_points, 3))
        z_norm = np.linalg.norm(z, axis=1, keepdims=True)
        over = z_norm[:, 0] > SPLIT_SAMPLE_MAX_NORM
        z[over] *= SPLIT_SAMPLE_MAX_NORM / z_norm[over]
        rot = rotmats_from_quats(children.rotations)
        offsets = np.einsum("pij,pj->pi", rot * children.scales()[:, None, :], z)
        children.positions = children.positions + offsets
        children.log_scales = children.log_scales - np.log(SPLIT_SCALE_DIVISOR)
        parts.append(children)
        srcs.append(np.full(children.num_points, -1, dtype=np.int64))

    if not parts:
        raise ValueError("all points pruned; cannot build an empty cloud")

    new_cloud = parts[0]
    for extra in parts[1:]:
        new_cloud = new_cloud.concat(extra)
    src_index = np.concatenate(srcs)

    affected_old = np.zeros(cloud.num_points, dtype=bool)
    affected_old[clone_ids] = True
    affected_old[split_ids] = True
    affected_old[prune_ids] = True

    return ActionResult(cloud=new_cloud, src_index=src_index,
                        affected_old=affected_old,
                        num_cloned=int(clone_ids.size),
                        num_split=int(split_ids.size),
                        num_pruned=int(prune_ids.size))


def reset_opacity(cloud: GaussianCloud,
                  ceiling: float = OPACITY_RESET_CEILING) -> GaussianCloud:
    """Cap every opacity at ``ceiling`` (in place); idempotent."""
    cloud.opacity_logits = np.minimum(cloud.opacity_logits, logit(ceiling))
    return cloud
