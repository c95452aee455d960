"""Synthetic ring-camera scenes for benchmarks, demos, and end-to-end runs.

A toy scene is a cloud of colored Gaussians inside the unit ball observed
by cameras evenly spaced on a ring, with ground-truth images rendered
from the cloud itself (8-bit quantized, like real captures). The sparse
points handed to the trainer are noisy subsamples of the true means, so
initialization is plausible but imperfect.

``GroundTruthRegenerator`` plays the role of a perfect regeneration
model: asked to regenerate a rendered view, it returns the ground-truth
render at that exact camera. It upper-bounds what view regeneration can
contribute, which makes it the right probe for "does the bootstrap loss
help when the regenerations are good?".
"""

from __future__ import annotations

import numpy as np

from .colmap_io import (PINHOLE, CameraExtrinsics, CameraIntrinsics, SparsePoint,
                        rotmat_to_qvec)
from .gaussian_core import GaussianCloud, logit
from .image_io import from_uint8, to_uint8
from .rasterizer import render
from .scene import Camera, Scene


def make_toy_cloud(num_gaussians: int, rng: np.random.Generator,
                   radius: float = 0.9) -> GaussianCloud:
    """Random colored Gaussians filling a ball around the origin."""
    direction = rng.standard_normal((num_gaussians, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.uniform(0.0, 1.0, num_gaussians) ** (1.0 / 3.0)
    positions = direction * r[:, None]
    rotations = rng.standard_normal((num_gaussians, 4))
    log_scales = np.log(rng.uniform(0.04, 0.12, (num_gaussians, 3)))
    opacities = rng.uniform(0.55, 0.95, num_gaussians)
    colors = rng.uniform(0.1, 0.95, (num_gaussians, 3))
    return GaussianCloud(positions=positions, rotations=rotations,
                         log_scales=log_scales,
                         opacity_logits=logit(opacities), colors=colors)


def _look_at(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-to-camera rotation for a camera looking at ``target``
    (image x right, image y down, +z into the scene; world up is +z)."""
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    norm = np.linalg.norm(right)
    if norm < 1e-9:  # looking straight up/down; pick any horizontal right
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / norm
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def ring_cameras(count: int = 24, radius: float = 2.2, height: float = 0.5,
                 image_size: int = 64, focal: float = 70.0) -> list[Camera]:
    """Cameras evenly spaced on a ring, all looking at the origin."""
    intr = CameraIntrinsics(camera_id=1, model_id=PINHOLE, width=image_size,
                            height=image_size,
                            params=np.array([focal, focal, image_size / 2.0,
                                             image_size / 2.0]))
    cameras = []
    target = np.zeros(3)
    for k in range(count):
        theta = 2.0 * np.pi * k / count
        position = np.array([radius * np.cos(theta), radius * np.sin(theta),
                             height])
        rot = _look_at(position, target)
        tvec = -rot @ position
        extr = CameraExtrinsics(qvec=rotmat_to_qvec(rot), tvec=tvec)
        cameras.append(Camera(intr, extr, name=f"cam_{k:03d}.png"))
    return cameras


def make_toy_scene(num_gaussians: int = 120, num_cameras: int = 24,
                   image_size: int = 64, seed: int = 0,
                   num_points: int = 100, quantize: bool = True,
                   tile: int = 16) -> tuple[Scene, GaussianCloud]:
    """Build a complete in-memory scene plus its generating cloud."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    cloud = make_toy_cloud(num_gaussians, rng)
    cameras = ring_cameras(num_cameras, image_size=image_size)

    images = {}
    for cam in cameras:
        img = np.clip(render(cloud, cam, tile=tile).image, 0.0, 1.0)
        images[cam.name] = from_uint8(to_uint8(img)) if quantize else img

    pick = rng.choice(cloud.num_points, size=min(num_points, cloud.num_points),
                      replace=False)
    jitter = 0.02 * rng.standard_normal((pick.size, 3))
    points = [SparsePoint(position=cloud.positions[i] + jitter[k],
                          color=to_uint8(cloud.colors[i]),
                          error=0.5)
              for k, i in enumerate(pick)]
    return Scene(cameras, points, images, name=f"toy_{seed}"), cloud


class GroundTruthRegenerator:
    """Regenerates a view by rendering the ground-truth cloud at it."""

    def __init__(self, cloud: GaussianCloud, tile: int = 16):
        self.cloud = cloud
        self.tile = tile

    def regenerate_view(self, image: np.ndarray, camera: Camera, req) -> np.ndarray:
        out = render(self.cloud, camera, tile=self.tile)
        return np.clip(out.image, 0.0, 1.0)
