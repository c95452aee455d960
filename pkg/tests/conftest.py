"""Shared fixtures and independent reference implementations.

The reference code here is deliberately written in the most direct way
possible (dense linear algebra, brute-force loops) so the fast package
implementations are checked against something that cannot share their
bugs.
"""

from __future__ import annotations

import numpy as np
import pytest

from bootsplat.colmap_io import (CameraExtrinsics, CameraIntrinsics, PINHOLE,
                                 rotmat_to_qvec)
from bootsplat.gaussian_core import GaussianCloud, logit
from bootsplat.scene import Camera


# ---------------------------------------------------------------------------
# Builders


def make_camera(width: int = 32, height: int = 32, focal: float = 30.0,
                qvec=(1.0, 0.0, 0.0, 0.0), tvec=(0.0, 0.0, 0.0),
                name: str = "cam") -> Camera:
    """Pinhole camera; default pose looks down +z from the origin."""
    intr = CameraIntrinsics(camera_id=1, model_id=PINHOLE, width=width,
                            height=height,
                            params=np.array([focal, focal,
                                             width / 2.0, height / 2.0]))
    extr = CameraExtrinsics(qvec=np.asarray(qvec, dtype=np.float64),
                            tvec=np.asarray(tvec, dtype=np.float64))
    return Camera(intr, extr, name=name)


def random_cloud(rng: np.random.Generator, n: int, *, with_sh: bool = False,
                 center=(0.0, 0.0, 4.0), spread: float = 1.0,
                 scale_range=(-2.5, -1.0),
                 alpha_range=(0.2, 0.9)) -> GaussianCloud:
    """Random well-conditioned cloud in front of the default camera."""
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    alphas = rng.uniform(*alpha_range, size=n)
    return GaussianCloud(
        positions=np.asarray(center) + rng.uniform(-spread, spread, size=(n, 3)),
        rotations=quats,
        log_scales=rng.uniform(*scale_range, size=(n, 3)),
        opacity_logits=logit(alphas),
        colors=rng.uniform(0.05, 0.95, size=(n, 3)),
        sh1=rng.normal(scale=0.05, size=(n, 3, 3)) if with_sh else None,
    )


# ---------------------------------------------------------------------------
# Reference implementations


def ref_quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion, independent formula."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def ref_blend(order_sigmas: np.ndarray, order_colors: np.ndarray,
              stop_eps: float = 0.0):
    """Direct front-to-back compositing of one pixel.

    ``order_sigmas``/``order_colors`` must already be depth-ordered.
    Returns (rgb, alpha). Mirrors the compositing sum with plain Python
    floats, including the early-stop rule (a contribution whose updated
    transmittance crosses ``stop_eps`` is still applied; later ones are
    dropped).
    """
    trans = 1.0
    rgb = np.zeros(3)
    alpha = 0.0
    for sigma, color in zip(order_sigmas, order_colors):
        sigma = float(sigma)
        weight = sigma * trans
        rgb = rgb + weight * np.asarray(color, dtype=np.float64)
        alpha += weight
        trans *= 1.0 - sigma
        if trans < stop_eps:
            break
    return rgb, alpha


def make_splats(mean2d, cov2d, depth, color, alpha):
    """Screen-space splat set built directly, bypassing projection.

    Enough for forward rasterization; the projection-context fields that
    only the backward chain needs stay unset.
    """
    from bootsplat.rasterizer import Splats2D
    mean2d = np.asarray(mean2d, dtype=np.float64).reshape(-1, 2)
    n = mean2d.shape[0]
    return Splats2D(
        point_id=np.arange(n, dtype=np.int64),
        mean2d=mean2d,
        cov2d=np.asarray(cov2d, dtype=np.float64).reshape(n, 2, 2),
        depth=np.asarray(depth, dtype=np.float64).reshape(n),
        color=np.asarray(color, dtype=np.float64).reshape(n, 3),
        alpha=np.asarray(alpha, dtype=np.float64).reshape(n),
        cloud=None, camera=None, p_cam=None, t2=None, m_mat=None,
        color_raw=None, viewdir=None, viewdist=None,
    )


def ref_gaussian_2d(mean2d, cov2d, px, py) -> float:
    """exp(-0.5 d^T C^{-1} d) via an explicit 2x2 solve."""
    d = np.array([px - mean2d[0], py - mean2d[1]])
    a, b, c = cov2d[0, 0], cov2d[0, 1], cov2d[1, 1]
    det = a * c - b * b
    maha = (c * d[0] * d[0] - 2 * b * d[0] * d[1] + a * d[1] * d[1]) / det
    return float(np.exp(-0.5 * maha))


def fd_gradient(fn, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function, one entry at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(0)
