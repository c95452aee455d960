"""Trainable scene representation: anisotropic 3D Gaussians.

Each point carries a position, a unit-quaternion rotation, per-axis scales
(stored in log space), an opacity (stored as a logit) and a base RGB color
with optional degree-1 spherical-harmonic coefficients for view dependence.
The log/logit parameterizations keep scales positive and opacities in (0,1)
without any projection step during optimization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .colmap_io import SparsePoint

COV_REGULARIZATION = 1e-8
INITIAL_OPACITY = 0.1

_CHECKPOINT_MAGIC = b"BSPLAT\x00"
_CHECKPOINT_VERSION = 1


class EmptyScene(ValueError):
    """A cloud cannot be built from zero points."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def rotmats_from_quats(quats: np.ndarray) -> np.ndarray:
    """Batch unit quaternions (N,4), w first, to rotation matrices (N,3,3)."""
    q = np.asarray(quats, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3))
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - z * w)
    rot[..., 0, 2] = 2 * (x * z + y * w)
    rot[..., 1, 0] = 2 * (x * y + z * w)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - x * w)
    rot[..., 2, 0] = 2 * (x * z - y * w)
    rot[..., 2, 1] = 2 * (y * z + x * w)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


@dataclass(frozen=True)
class Covariance3:
    """3x3 symmetric positive semi-definite covariance."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"expected 3x3 matrix, got {m.shape}")
        if np.max(np.abs(m - m.T)) > 1e-9:
            raise ValueError("covariance not symmetric")
        if np.min(np.linalg.eigvalsh(m)) < -1e-9:
            raise ValueError("covariance not positive semi-definite")
        object.__setattr__(self, "matrix", m)


def build_covariance(rotation, log_scale) -> Covariance3:
    """Covariance from a unit quaternion and log-scales.

    The factored form R * diag(exp(2s)) * R^T is PSD by construction.
    """
    rot = rotmats_from_quats(np.asarray(rotation, dtype=np.float64).reshape(1, 4))[0]
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64).reshape(3))
    m = rot @ np.diag(s2) @ rot.T
    return Covariance3(0.5 * (m + m.T))


def evaluate_gaussian(mu, cov, x) -> float:
    """Unnormalized Gaussian density exp(-0.5 d^T Sigma^-1 d), 1 at the mean.

    Sigma is regularized by +1e-8*I before the solve so that degenerate
    needle Gaussians stay invertible.
    """
    matrix = cov.matrix if isinstance(cov, Covariance3) else np.asarray(cov, dtype=np.float64)
    d = np.asarray(x, dtype=np.float64).reshape(3) - np.asarray(mu, dtype=np.float64).reshape(3)
    reg = matrix + COV_REGULARIZATION * np.eye(3)
    return float(np.exp(-0.5 * d @ np.linalg.solve(reg, d)))


@dataclass
class GaussianCloud:
    """Struct-of-arrays container for P Gaussians.

    positions      (P, 3) scene units
    rotations      (P, 4) unit quaternions, w first
    log_scales     (P, 3) log of the per-axis standard deviations
    opacity_logits (P,)   opacity = sigmoid(logit)
    colors         (P, 3) base RGB in [0, 1]
    sh1            (P, 3, 3) or None; view color = base + sh1 @ view_dir
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    sh1: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        p = self.positions.shape[0]
        if p < 1:
            raise EmptyScene("a Gaussian cloud needs at least one point")
        rot = np.asarray(self.rotations, dtype=np.float64).reshape(p, 4)
        self.rotations = rot / np.linalg.norm(rot, axis=1, keepdims=True)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(p, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(p)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(p, 3)
        if self.sh1 is not None:
            self.sh1 = np.asarray(self.sh1, dtype=np.float64).reshape(p, 3, 3)

    @property
    def num_points(self) -> int:
        return self.positions.shape[0]

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def normalize_rotations(self) -> None:
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.colors.copy(),
            None if self.sh1 is None else self.sh1.copy(),
        )

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(
            self.positions[index],
            self.rotations[index],
            self.log_scales[index],
            self.opacity_logits[index],
            self.colors[index],
            None if self.sh1 is None else self.sh1[index],
        )

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        if (self.sh1 is None) != (other.sh1 is None):
            raise ValueError("cannot concatenate clouds with mismatched SH layout")
        return GaussianCloud(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.colors, other.colors]),
            None if self.sh1 is None else np.concatenate([self.sh1, other.sh1]),
        )


def init_from_sfm(points: list[SparsePoint], with_sh: bool = False) -> GaussianCloud:
    """One isotropic Gaussian per sparse SfM point.

    Initial scale is the log of the mean distance to the 3 nearest
    neighbors (fewer when the cloud is tiny, 0.1 scene units for a single
    point); initial opacity is 0.1.
    """
    if not points:
        raise EmptyScene("no SfM points")
    p = len(points)
    positions = np.stack([pt.position for pt in points])
    colors = np.stack([pt.color for pt in points]).astype(np.float64) / 255.0

    k = min(3, p - 1)
    if k == 0:
        mean_dist = np.full(1, 0.1)
    else:
        tree = cKDTree(positions)
        # query includes the point itself at distance 0
        dists, _ = tree.query(positions, k=k + 1)
        mean_dist = np.maximum(dists[:, 1:].mean(axis=1), 1e-7)

    rotations = np.zeros((p, 4))
    rotations[:, 0] = 1.0
    log_scales = np.tile(np.log(mean_dist)[:, None], (1, 3))
    opacity_logits = np.full(p, logit(INITIAL_OPACITY))
    sh1 = np.zeros((p, 3, 3)) if with_sh else None
    return GaussianCloud(positions, rotations, log_scales, opacity_logits, colors, sh1)


def save_checkpoint(cloud: GaussianCloud, path) -> None:
    """Versioned little-endian binary dump of all parameter arrays."""
    p = cloud.num_points
    has_sh = cloud.sh1 is not None
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQB", _CHECKPOINT_VERSION, p, int(has_sh)))
        for arr in (cloud.positions, cloud.rotations, cloud.log_scales,
                    cloud.opacity_logits, cloud.colors):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if has_sh:
            f.write(np.ascontiguousarray(cloud.sh1, dtype="<f8").tobytes())


def load_checkpoint(path) -> GaussianCloud:
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(_CHECKPOINT_MAGIC)] != _CHECKPOINT_MAGIC:
        raise ValueError("not a gaussian cloud checkpoint")
    off = len(_CHECKPOINT_MAGIC)
    version, p, has_sh = struct.unpack_from("<IQB", data, off)
    if version != _CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += struct.calcsize("<IQB")

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        off += n * 8
        return arr.astype(np.float64)

    positions = take((p, 3))
    rotations = take((p, 4))
    log_scales = take((p, 3))
    opacity_logits = take((p,))
    colors = take((p, 3))
    sh1 = take((p, 3, 3)) if has_sh else None
    return GaussianCloud(positions, rotations, log_scales, opacity_logits, colors, sh1)
