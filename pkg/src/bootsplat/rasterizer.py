"""Differentiable tile rasterizer for 3D Gaussian scenes.

Pipeline
--------
``project``            perspective projection of every Gaussian into screen
                       space (EWA first-order covariance transfer plus a
                       fixed low-pass dilation), view-dependent color, and
                       near-plane culling.
``rasterize``          depth-sorted, tile-binned, front-to-back alpha
                       blending producing the image plus alpha / expected
                       depth / contributor-count maps.
``rasterize_backward`` hand-derived analytic gradients of a scalar image
                       loss with respect to every Gaussian parameter,
                       matching the forward pass exactly (same sort, same
                       cutoff, same early stop).

Everything is float64, deterministic, and free of framework autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .gaussian_core import GaussianCloud, rotmats_from_quats
from .scene import Camera

# Screen-space covariance dilation (pixels^2). Guarantees every splat is at
# least ~a pixel wide so sub-pixel Gaussians stay visible and invertible.
COV2D_DILATION = 0.3

# Transmittance early stop: once T would drop below this the remaining
# splats of a pixel are skipped (the triggering contribution included).
STOP_EPS = 1e-4

R2_CUTOFF = _kernels.R2_CUTOFF

DEFAULT_NEAR = 0.01


@dataclass
class Splats2D:
    """Screen-space Gaussians plus the projection context needed to chain
    image-space gradients back to the 3D parameters.

    Per-splat arrays are index-aligned; ``point_id[i]`` is the row of the
    source cloud (unique — projection is one-to-one for uncov splats).
    """

    point_id: np.ndarray      # (S,)   int64 row in the source cloud
    mean2d: np.ndarray        # (S, 2) pixel coords (pixel centers at +0.5)
    cov2d: np.ndarray         # (S, 2, 2) screen covariance incl. dilation
    depth: np.ndarray         # (S,)   camera-space z, used for sorting
    color: np.ndarray         # (S, 3) view-dependent RGB clipped to [0, 1]
    alpha: np.ndarray         # (S,)   sigmoid(opacity_logit)
    # --- projection context (backward only) ---
    cloud: GaussianCloud = field(repr=False)
    camera: Camera = field(repr=False)
    p_cam: np.ndarray = field(repr=False)       # (S, 3) camera-space mean
    t2: np.ndarray = field(repr=False)          # (S, 2, 3) J @ W
    m_mat: np.ndarray = field(repr=False)       # (S, 3, 3) R @ diag(exp(s))
    color_raw: np.ndarray = field(repr=False)   # (S, 3) pre-clip RGB
    viewdir: np.ndarray = field(repr=False)     # (S, 3) unit eye-to-mean direction
    viewdist: np.ndarray = field(repr=False)    # (S,)

    @property
    def num_splats(self) -> int:
        return self.point_id.shape[0]


@dataclass
class RenderOutput:
    """Result of one rasterization pass."""

    image: np.ndarray        # (H, W, 3) float64 in [0, 1]
    alpha_map: np.ndarray    # (H, W) accumulated opacity = 1 - final T
    depth_map: np.ndarray    # (H, W) alpha-weighted expected depth (unnormalized)
    contrib_count: np.ndarray  # (H, W) int32 splats blended per pixel
    tile: int

    def expected_depth(self, eps: float = 1e-12) -> np.ndarray:
        """Depth normalized by accumulated alpha (0 where nothing rendered)."""
        out = np.zeros_like(self.depth_map)
        mask = self.alpha_map > eps
        out[mask] = self.depth_map[mask] / self.alpha_map[mask]
        return out


@dataclass
class CloudGradients:
    """Per-parameter loss gradients, row-aligned with the source cloud."""

    positions: np.ndarray       # (P, 3)
    rotations: np.ndarray       # (P, 4)
    log_scales: np.ndarray      # (P, 3)
    opacity_logits: np.ndarray  # (P,)
    colors: np.ndarray          # (P, 3)
    sh1: np.ndarray | None      # (P, 3, 3) or None
    screen: np.ndarray          # (P, 2) raw image-plane positional gradient

    @classmethod
    def zeros(cls, cloud: GaussianCloud) -> "CloudGradients":
        p = cloud.num_points
        return cls(
            positions=np.zeros((p, 3)),
            rotations=np.zeros((p, 4)),
            log_scales=np.zeros((p, 3)),
            opacity_logits=np.zeros(p),
            colors=np.zeros((p, 3)),
            sh1=np.zeros((p, 3, 3)) if cloud.sh1 is not None else None,
            screen=np.zeros((p, 2)),
        )

    def add_(self, other: "CloudGradients", scale: float = 1.0) -> None:
        self.positions += scale * other.positions
        self.rotations += scale * other.rotations
        self.log_scales += scale * other.log_scales
        self.opacity_logits += scale * other.opacity_logits
        self.colors += scale * other.colors
        if self.sh1 is not None and other.sh1 is not None:
            self.sh1 += scale * other.sh1
        self.screen += scale * other.screen


def perspective_jacobian(p_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Batched first-order Jacobian of (x, y, z) -> (fx*x/z, fy*y/z)."""
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    n = p_cam.shape[0]
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / (z * z)
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / (z * z)
    return jac


def project(cloud: GaussianCloud, camera: Camera, near: float = DEFAULT_NEAR) -> Splats2D:
    """Project a Gaussian cloud into the camera's image plane.

    Gaussians at or behind ``near`` (camera-space z <= near) are culled.
    The screen covariance is J W Sigma Wt Jt (upper-left 2x2 of the
    transferred 3D covariance) plus an isotropic dilation of
    ``COV2D_DILATION`` pixels^2.
    """
    intr = camera.intrinsics
    rot = camera.extrinsics.rotation_matrix()
    p_cam_all = camera.world_to_camera(cloud.positions)
    keep = p_cam_all[:, 2] > near
    ids = np.nonzero(keep)[0].astype(np.int64)

    p_cam = p_cam_all[keep]
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    mean2d = np.stack([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy], axis=1)

    quats = cloud.rotations[keep]
    log_scales = cloud.log_scales[keep]
    rmats = rotmats_from_quats(quats)
    m_mat = rmats * np.exp(log_scales)[:, None, :]  # R @ diag(exp(s))

    jac = perspective_jacobian(p_cam, intr.fx, intr.fy)
    t2 = jac @ rot  # (S, 2, 3)
    tm = t2 @ m_mat
    cov2d = tm @ np.swapaxes(tm, 1, 2)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    center = camera.center()
    offset = cloud.positions[keep] - center
    dist = np.linalg.norm(offset, axis=1)
    dist = np.maximum(dist, 1e-12)
    viewdir = offset / dist[:, None]

    color_raw = cloud.colors[keep].copy()
    if cloud.sh1 is not None:
        color_raw = color_raw + np.einsum("sij,sj->si", cloud.sh1[keep], viewdir)
    color = np.clip(color_raw, 0.0, 1.0)

    alpha = 1.0 / (1.0 + np.exp(-cloud.opacity_logits[keep]))

    return Splats2D(
        point_id=ids,
        mean2d=mean2d,
        cov2d=cov2d,
        depth=z.copy(),
        color=color,
        alpha=alpha,
        cloud=cloud,
        camera=camera,
        p_cam=p_cam,
        t2=t2,
        m_mat=m_mat,
        color_raw=color_raw,
        viewdir=viewdir,
        viewdist=dist,
    )


def _sorted_order(splats: Splats2D) -> np.ndarray:
    """Total blending order: ascending depth, ties broken by point id.

    The id tiebreak makes the composite invariant to any permutation of
    the input splats.
    """
    return np.lexsort((splats.point_id, splats.depth))


def _conic(cov2d: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Inverse-covariance entries (a, b, c) and the determinant."""
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    return c / det, -b / det, a / det, det


def _prepare(splats: Splats2D, width: int, height: int, tile: int):
    """Sort, build conics and cutoff radii, and bin splats into tiles."""
    order = _sorted_order(splats)
    u = np.ascontiguousarray(splats.mean2d[order, 0])
    v = np.ascontiguousarray(splats.mean2d[order, 1])
    cov = splats.cov2d[order]
    qa, qb, qc, det = _conic(cov)
    if np.any(det <= 0):
        raise ValueError("screen covariance must be positive definite")
    alpha = np.ascontiguousarray(splats.alpha[order])
    color = np.ascontiguousarray(splats.color[order])
    depth = np.ascontiguousarray(splats.depth[order])
    radius = np.sqrt(R2_CUTOFF)
    rx = radius * np.sqrt(cov[:, 0, 0])
    ry = radius * np.sqrt(cov[:, 1, 1])
    ntx = max(1, -(-width // tile))
    nty = max(1, -(-height // tile))
    offsets, indices = _kernels.bin_splats(u, v, rx, ry, float(width), float(height),
                                           tile, ntx, nty)
    return order, u, v, qa, qb, qc, alpha, color, depth, offsets, indices, ntx, nty


def rasterize(splats: Splats2D, width: int, height: int, tile: int = 16,
              stop_eps: float = STOP_EPS) -> RenderOutput:
    """Composite splats front-to-back into an (H, W, 3) image.

    The output is bitwise independent of the tile size and of the order
    the splats are supplied in.
    """
    if tile < 1:
        raise ValueError("tile must be >= 1")
    image = np.zeros((height, width, 3))
    alpha_map = np.zeros((height, width))
    depth_map = np.zeros((height, width))
    contrib = np.zeros((height, width), dtype=np.int32)
    if splats.num_splats == 0:
        return RenderOutput(image, alpha_map, depth_map, contrib, tile)
    (_, u, v, qa, qb, qc, alpha, color, depth,
     offsets, indices, ntx, nty) = _prepare(splats, width, height, tile)
    _kernels.forward(u, v, qa, qb, qc, alpha, color, depth, offsets, indices,
                     width, height, tile, ntx, nty, stop_eps,
                     image, alpha_map, depth_map, contrib)
    return RenderOutput(image, alpha_map, depth_map, contrib, tile)


def _quat_rotation_grad(g_r: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Contract dL/dR with dR/dq for unit quaternions q = (w, x, y, z)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = g_r  # (S, 3, 3)
    g00, g01, g02 = g[:, 0, 0], g[:, 0, 1], g[:, 0, 2]
    g10, g11, g12 = g[:, 1, 0], g[:, 1, 1], g[:, 1, 2]
    g20, g21, g22 = g[:, 2, 0], g[:, 2, 1], g[:, 2, 2]
    dw = 2.0 * (-g01 * z + g02 * y + g10 * z - g12 * x - g20 * y + g21 * x)
    dx = 2.0 * (g01 * y + g02 * z + g10 * y - 2.0 * g11 * x - g12 * w
                + g20 * z + g21 * w - 2.0 * g22 * x)
    dy = 2.0 * (-2.0 * g00 * y + g01 * x + g02 * w + g10 * x + g12 * z
                - g20 * w + g21 * z - 2.0 * g22 * y)
    dz = 2.0 * (-2.0 * g00 * z - g01 * w + g02 * x + g10 * w - 2.0 * g11 * z
                + g12 * y + g20 * x + g21 * y)
    return np.stack([dw, dx, dy, dz], axis=1)


def rasterize_backward(splats: Splats2D, out: RenderOutput,
                       dl_dimage: np.ndarray,
                       stop_eps: float = STOP_EPS) -> CloudGradients:
    """Analytic gradients of sum(dl_dimage * image) w.r.t. cloud parameters.

    Replays the forward blend (same order, cutoff, and early stop), runs
    the per-pixel suffix recursion for d/d(sigma_i), then chains through
    the conic inverse, the covariance transfer, the projection Jacobian
    (including its dependence on the camera-space mean), the color clip,
    the view-direction term, the scale exponential, and the quaternion
    normalization.
    """
    cloud = splats.cloud
    grads = CloudGradients.zeros(cloud)
    if splats.num_splats == 0:
        return grads
    height, width = dl_dimage.shape[:2]
    (order, u, v, qa, qb, qc, alpha_s, color_s, _depth,
     offsets, indices, ntx, nty) = _prepare(splats, width, height, out.tile)

    n = splats.num_splats
    g_u = np.zeros(n)
    g_v = np.zeros(n)
    g_qa = np.zeros(n)
    g_qb = np.zeros(n)
    g_qc = np.zeros(n)
    g_alpha_s = np.zeros(n)
    g_color_s = np.zeros((n, 3))
    _kernels.backward(u, v, qa, qb, qc, alpha_s, color_s, offsets, indices,
                      width, height, out.tile, ntx, nty, stop_eps,
                      np.ascontiguousarray(dl_dimage),
                      g_u, g_v, g_qa, g_qb, g_qc, g_alpha_s, g_color_s)

    # Un-sort: pixel-domain gradients back in splat order.
    inv = np.empty(n, dtype=np.int64)
    inv[order] = np.arange(n)
    g_mean2d = np.stack([g_u, g_v], axis=1)[inv]
    g_conic = np.stack([g_qa, g_qb, g_qc], axis=1)[inv]
    g_alpha = g_alpha_s[inv]
    g_color = g_color_s[inv]

    # --- conic -> screen covariance ---
    cov = splats.cov2d
    a = cov[:, 0, 0]
    b = cov[:, 0, 1]
    c = cov[:, 1, 1]
    det = a * c - b * b
    q_mat = np.empty_like(cov)
    q_mat[:, 0, 0] = c / det
    q_mat[:, 0, 1] = -b / det
    q_mat[:, 1, 0] = -b / det
    q_mat[:, 1, 1] = a / det
    gq_mat = np.empty_like(cov)
    gq_mat[:, 0, 0] = g_conic[:, 0]
    gq_mat[:, 0, 1] = 0.5 * g_conic[:, 1]
    gq_mat[:, 1, 0] = 0.5 * g_conic[:, 1]
    gq_mat[:, 1, 1] = g_conic[:, 2]
    g_cov = -q_mat @ gq_mat @ q_mat  # symmetric

    # --- screen covariance -> transfer matrix, 3D covariance factor ---
    t2 = splats.t2
    m_mat = splats.m_mat
    tm = t2 @ m_mat
    g_t2 = 2.0 * (g_cov @ tm) @ np.swapaxes(m_mat, 1, 2)
    g_sigma3 = np.swapaxes(t2, 1, 2) @ g_cov @ t2  # symmetric (S, 3, 3)
    g_m = 2.0 * g_sigma3 @ m_mat

    # --- transfer matrix -> projection Jacobian -> camera-space mean ---
    rot = splats.camera.extrinsics.rotation_matrix()
    g_jac = g_t2 @ rot.T
    intr = splats.camera.intrinsics
    x, y, z = splats.p_cam[:, 0], splats.p_cam[:, 1], splats.p_cam[:, 2]
    inv_z2 = 1.0 / (z * z)
    g_pcam = np.zeros_like(splats.p_cam)
    g_pcam[:, 0] = -intr.fx * inv_z2 * g_jac[:, 0, 2]
    g_pcam[:, 1] = -intr.fy * inv_z2 * g_jac[:, 1, 2]
    g_pcam[:, 2] = (-intr.fx * inv_z2 * g_jac[:, 0, 0]
                    - intr.fy * inv_z2 * g_jac[:, 1, 1]
                    + 2.0 * intr.fx * x / (z ** 3) * g_jac[:, 0, 2]
                    + 2.0 * intr.fy * y / (z ** 3) * g_jac[:, 1, 2])

    # --- screen mean -> camera-space mean ---
    g_pcam[:, 0] += g_mean2d[:, 0] * intr.fx / z
    g_pcam[:, 1] += g_mean2d[:, 1] * intr.fy / z
    g_pcam[:, 2] += (-g_mean2d[:, 0] * intr.fx * x * inv_z2
                     - g_mean2d[:, 1] * intr.fy * y * inv_z2)

    g_mu = g_pcam @ rot  # (W^T g) batched

    # --- color clip, base color, view-dependent term ---
    pass_mask = (splats.color_raw > 0.0) & (splats.color_raw < 1.0)
    g_raw = g_color * pass_mask
    ids = splats.point_id
    grads.colors[ids] = g_raw
    if cloud.sh1 is not None:
        vdir = splats.viewdir
        grads.sh1[ids] = g_raw[:, :, None] * vdir[:, None, :]
        g_vdir = np.einsum("sij,si->sj", cloud.sh1[ids], g_raw)
        proj = g_vdir - vdir * np.sum(vdir * g_vdir, axis=1, keepdims=True)
        g_mu = g_mu + proj / splats.viewdist[:, None]

    # --- opacity ---
    grads.opacity_logits[ids] = g_alpha * splats.alpha * (1.0 - splats.alpha)

    # --- covariance factor -> log-scales and rotation quaternion ---
    exp_s = np.exp(cloud.log_scales[ids])
    rmats = rotmats_from_quats(cloud.rotations[ids])
    grads.log_scales[ids] = np.einsum("sik,sik->sk", rmats, g_m) * exp_s
    g_r = g_m * exp_s[:, None, :]
    quats = cloud.rotations[ids]
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    q_n = quats / norms
    g_qn = _quat_rotation_grad(g_r, q_n)
    grads.rotations[ids] = (g_qn - q_n * np.sum(q_n * g_qn, axis=1,
                                                keepdims=True)) / norms

    grads.positions[ids] = g_mu
    grads.screen[ids] = g_mean2d
    return grads


def render(cloud: GaussianCloud, camera: Camera, tile: int = 16,
           stop_eps: float = STOP_EPS, near: float = DEFAULT_NEAR) -> RenderOutput:
    """Convenience: project then rasterize at the camera's resolution."""
    splats = project(cloud, camera, near=near)
    return rasterize(splats, camera.width, camera.height, tile=tile,
                     stop_eps=stop_eps)


def render_with_grad(cloud: GaussianCloud, camera: Camera,
                     dl_dimage_fn, tile: int = 16,
                     stop_eps: float = STOP_EPS, near: float = DEFAULT_NEAR):
    """Render, evaluate ``loss, dl_dimage = dl_dimage_fn(image)``, and
    return (loss, RenderOutput, CloudGradients)."""
    splats = project(cloud, camera, near=near)
    out = rasterize(splats, camera.width, camera.height, tile=tile,
                    stop_eps=stop_eps)
    loss, dl_dimage = dl_dimage_fn(out.image)
    grads = rasterize_backward(splats, out, dl_dimage, stop_eps=stop_eps)
    return loss, out, grads
