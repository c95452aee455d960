"""Projection, tile-based compositing, and their reference oracles."""

import numpy as np
import pytest

from bootsplat.gaussian_core import GaussianCloud, build_covariance, logit
from bootsplat.rasterizer import (COV2D_DILATION, Splats2D, project, rasterize,
                                  render)
from conftest import (make_camera, make_splats, random_cloud, ref_blend,
                      ref_gaussian_2d, ref_quat_to_rotmat)


def pinhole_map(camera, p_world):
    """Direct pinhole projection of one world point (reference)."""
    r = camera.extrinsics.rotation_matrix()
    pc = r @ np.asarray(p_world) + camera.extrinsics.tvec
    fx, fy = camera.intrinsics.fx, camera.intrinsics.fy
    cx, cy = camera.intrinsics.cx, camera.intrinsics.cy
    return np.array([fx * pc[0] / pc[2] + cx, fy * pc[1] / pc[2] + cy]), pc[2]


class TestProject:
    def test_on_axis_gaussian(self):
        cam = make_camera(width=64, height=64, focal=50.0)
        d, s = 5.0, 0.2
        cloud = GaussianCloud(
            positions=np.array([[0.0, 0.0, d]]),
            rotations=np.array([[1.0, 0, 0, 0]]),
            log_scales=np.full((1, 3), np.log(s)),
            opacity_logits=np.array([0.0]),
            colors=np.array([[0.5, 0.5, 0.5]]))
        splats = project(cloud, cam)
        np.testing.assert_allclose(splats.mean2d[0], [32.0, 32.0], atol=1e-12)
        expected = (50.0 * s / d) ** 2 * np.eye(2) + COV2D_DILATION * np.eye(2)
        np.testing.assert_allclose(splats.cov2d[0], expected, rtol=1e-12)
        assert splats.depth[0] == pytest.approx(d)

    def test_behind_camera_culled(self, rng):
        cloud = random_cloud(rng, 5)
        cloud.positions[:, 2] = -np.abs(cloud.positions[:, 2]) - 1.0
        splats = project(cloud, make_camera())
        assert splats.mean2d.shape[0] == 0

    def test_mixed_culling_keeps_ids(self, rng):
        cloud = random_cloud(rng, 6)
        cloud.positions[:, 2] = [3.0, -2.0, 4.0, -1.0, 5.0, 2.0]
        splats = project(cloud, make_camera())
        np.testing.assert_array_equal(np.sort(splats.point_id), [0, 2, 4, 5])

    def test_translation_invariance(self, rng):
        cloud = random_cloud(rng, 8, with_sh=True)
        cam = make_camera(qvec=rng.normal(size=4), tvec=(0.1, -0.2, 0.3))
        delta = np.array([1.5, -2.0, 0.7])
        moved = cloud.copy()
        moved.positions = cloud.positions + delta
        # camera center moves by the same delta: t' = -R(c + delta)
        r = cam.extrinsics.rotation_matrix()
        cam2 = cam.with_pose(cam.extrinsics.qvec,
                             cam.extrinsics.tvec - r @ delta)
        a = project(cloud, cam)
        b = project(moved, cam2)
        np.testing.assert_allclose(b.mean2d, a.mean2d, atol=1e-9)
        np.testing.assert_allclose(b.cov2d, a.cov2d, atol=1e-9)
        np.testing.assert_allclose(b.depth, a.depth, atol=1e-9)

    def test_mean_matches_direct_pinhole(self, rng):
        cloud = random_cloud(rng, 10)
        cam = make_camera(width=48, height=40, focal=35.0,
                          qvec=rng.normal(size=4), tvec=rng.normal(size=3))
        # reposition in front of this camera
        r = cam.extrinsics.rotation_matrix()
        cam_space = rng.uniform([-0.5, -0.5, 2.0], [0.5, 0.5, 6.0], size=(10, 3))
        cloud.positions = (cam_space - cam.extrinsics.tvec) @ r
        splats = project(cloud, cam)
        for i, pid in enumerate(splats.point_id):
            expected, depth = pinhole_map(cam, cloud.positions[pid])
            np.testing.assert_allclose(splats.mean2d[i], expected, atol=1e-9)
            assert splats.depth[i] == pytest.approx(depth, abs=1e-9)

    def test_cov2d_matches_fd_jacobian(self, rng):
        """Screen covariance equals J Sigma J^T + dilation with J taken from
        finite differences of the full projection map."""
        cloud = random_cloud(rng, 6, scale_range=(-2.0, -0.5))
        cam = make_camera(focal=40.0, qvec=rng.normal(size=4))
        r = cam.extrinsics.rotation_matrix()
        cam_space = rng.uniform([-0.4, -0.4, 2.5], [0.4, 0.4, 5.0], size=(6, 3))
        cloud.positions = (cam_space - cam.extrinsics.tvec) @ r
        splats = project(cloud, cam)
        h = 1e-6
        for i, pid in enumerate(splats.point_id):
            jac = np.zeros((2, 3))
            for k in range(3):
                dp = np.zeros(3)
                dp[k] = h
                up, _ = pinhole_map(cam, cloud.positions[pid] + dp)
                dn, _ = pinhole_map(cam, cloud.positions[pid] - dp)
                jac[:, k] = (up - dn) / (2 * h)
            sigma = build_covariance(cloud.rotations[pid],
                                     cloud.log_scales[pid]).matrix
            expected = jac @ sigma @ jac.T + COV2D_DILATION * np.eye(2)
            np.testing.assert_allclose(splats.cov2d[i], expected,
                                       rtol=1e-4, atol=1e-6)

    def test_sh_color_varies_with_view_direction(self, rng):
        cloud = random_cloud(rng, 1, with_sh=True)
        cloud.positions[0] = [0.0, 0.0, 4.0]
        cloud.colors[0] = 0.5
        cloud.sh1[:] = 0.0
        cloud.sh1[0, 0, 0] = 0.3  # red channel follows the view x-direction
        head_on = project(cloud, make_camera())
        # camera moved +x: eye-to-mean direction gains a -x component
        side = project(cloud, make_camera(tvec=(-2.0, 0.0, 0.0)))
        assert head_on.color[0, 0] == pytest.approx(0.5)
        assert side.color[0, 0] < 0.5 - 0.05
        np.testing.assert_allclose(head_on.color[0, 1:], 0.5)
        assert np.all(side.color >= 0.0) and np.all(side.color <= 1.0)

    def test_without_sh_color_is_base(self, rng):
        cloud = random_cloud(rng, 4, with_sh=False)
        splats = project(cloud, make_camera())
        np.testing.assert_allclose(
            splats.color, np.clip(cloud.colors[splats.point_id], 0, 1))


class TestRasterizeTrivial:
    def one_pixel(self, splats, stop_eps=1e-4):
        return rasterize(splats, 1, 1, tile=16, stop_eps=stop_eps)

    def test_single_opaque_splat_center(self):
        color = np.array([0.2, 0.6, 0.9])
        splats = make_splats([[0.5, 0.5]], [np.eye(2)], [1.0], [color], [1.0])
        out = self.one_pixel(splats)
        np.testing.assert_allclose(out.image[0, 0], color, atol=1e-12)
        assert out.alpha_map[0, 0] == pytest.approx(1.0)
        assert out.contrib_count[0, 0] == 1

    def test_two_coincident_half_opacity(self):
        c1 = np.array([1.0, 0.0, 0.0])
        c2 = np.array([0.0, 1.0, 0.0])
        splats = make_splats([[0.5, 0.5], [0.5, 0.5]],
                             [np.eye(2), np.eye(2)], [1.0, 2.0],
                             [c1, c2], [0.5, 0.5])
        out = self.one_pixel(splats)
        np.testing.assert_allclose(out.image[0, 0], 0.5 * c1 + 0.25 * c2,
                                   atol=1e-12)
        assert out.alpha_map[0, 0] == pytest.approx(0.75)

    def test_depth_order_not_input_order(self):
        c_near = np.array([1.0, 1.0, 1.0])
        c_far = np.array([0.0, 0.0, 0.0])
        # far splat listed first; near one must still win the blend
        splats = make_splats([[0.5, 0.5], [0.5, 0.5]],
                             [np.eye(2), np.eye(2)], [9.0, 1.0],
                             [c_far, c_near], [0.9, 0.9])
        out = self.one_pixel(splats)
        np.testing.assert_allclose(out.image[0, 0],
                                   0.9 * c_near + 0.09 * c_far, atol=1e-12)

    def test_empty_splats(self):
        splats = make_splats(np.zeros((0, 2)), np.zeros((0, 2, 2)),
                             np.zeros(0), np.zeros((0, 3)), np.zeros(0))
        out = rasterize(splats, 4, 4)
        assert np.all(out.image == 0) and np.all(out.alpha_map == 0)


def _random_pixel_case(rng, n):
    """Random overlapping splats around a single pixel at (0.5, 0.5)."""
    mean2d = rng.uniform(-2.5, 3.5, size=(n, 2))
    covs = []
    for _ in range(n):
        a = rng.uniform(0.5, 3.0, size=(2, 2))
        covs.append(a @ a.T + 0.3 * np.eye(2))
    depth = rng.permutation(np.linspace(1.0, 10.0, n))
    color = rng.uniform(0, 1, size=(n, 3))
    alpha = rng.uniform(0.05, 0.95, size=n)
    return make_splats(mean2d, np.array(covs), depth, color, alpha)


def _unsorted_eq6(splats, px=0.5, py=0.5):
    """Direct compositing sum without sorting: for each splat, the
    transmittance product runs over every other splat strictly in front
    (depth, then point id as the tie-break)."""
    n = splats.depth.shape[0]
    sig = np.array([splats.alpha[i] * ref_gaussian_2d(splats.mean2d[i],
                                                      splats.cov2d[i], px, py)
                    for i in range(n)])
    rgb = np.zeros(3)
    for i in range(n):
        t = 1.0
        for j in range(n):
            if (splats.depth[j], splats.point_id[j]) < (splats.depth[i],
                                                        splats.point_id[i]):
                t *= 1.0 - sig[j]
        rgb += splats.color[i] * sig[i] * t
    return rgb


class TestBlendOracle:
    def test_thousand_random_single_pixel_cases(self):
        rng = np.random.default_rng(123)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(1, 21))
            splats = _random_pixel_case(rng, n)
            out = rasterize(splats, 1, 1, tile=16, stop_eps=0.0)
            expected = _unsorted_eq6(splats)
            worst = max(worst, float(np.max(np.abs(out.image[0, 0] - expected))))
        assert worst < 1e-10, f"worst blend deviation {worst:.3e}"

    def test_sorted_reference_including_early_stop(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n = int(rng.integers(2, 25))
            splats = _random_pixel_case(rng, n)
            out = rasterize(splats, 1, 1, stop_eps=1e-4)
            order = np.lexsort((splats.point_id, splats.depth))
            sig = [splats.alpha[i] * ref_gaussian_2d(splats.mean2d[i],
                                                     splats.cov2d[i], 0.5, 0.5)
                   for i in order]
            rgb, a = ref_blend(np.array(sig), splats.color[order],
                               stop_eps=1e-4)
            np.testing.assert_allclose(out.image[0, 0], rgb, atol=1e-10)
            assert out.alpha_map[0, 0] == pytest.approx(a, abs=1e-10)


class TestRasterizeInvariants:
    def test_permutation_bitwise(self, rng):
        cloud = random_cloud(rng, 40)
        cam = make_camera(width=40, height=40)
        base = render(cloud, cam)
        for seed in range(3):
            perm = np.random.default_rng(seed).permutation(40)
            shuffled = cloud.subset(perm)
            out = render(shuffled, cam)
            np.testing.assert_array_equal(out.image, base.image)
            np.testing.assert_array_equal(out.alpha_map, base.alpha_map)

    def test_energy_bound(self, rng):
        cloud = random_cloud(rng, 60, alpha_range=(0.5, 0.99))
        cloud.colors[:] = 1.0
        out = render(cloud, make_camera(width=48, height=48))
        assert np.max(out.image) <= 1.0 + 1e-6
        assert np.max(out.alpha_map) <= 1.0 and np.min(out.alpha_map) >= 0.0

    def test_tile_equivalence_bitwise(self, rng):
        cloud = random_cloud(rng, 50)
        cam = make_camera(width=37, height=29)  # not a tile multiple
        a = render(cloud, cam, tile=16)
        b = render(cloud, cam, tile=max(cam.width, cam.height))
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.alpha_map, b.alpha_map)
        np.testing.assert_array_equal(a.contrib_count, b.contrib_count)

    def test_early_stop_close_to_exact(self, rng):
        cloud = random_cloud(rng, 80, alpha_range=(0.6, 0.95), spread=0.4)
        cam = make_camera(width=32, height=32)
        fast = render(cloud, cam, stop_eps=1e-4)
        exact = render(cloud, cam, stop_eps=0.0)
        assert np.max(np.abs(fast.image - exact.image)) < 1e-3

    def test_expected_depth_of_single_splat(self):
        splats = make_splats([[0.5, 0.5]], [np.eye(2)], [4.2],
                             [[1, 1, 1]], [0.8])
        out = rasterize(splats, 1, 1)
        assert out.expected_depth()[0, 0] == pytest.approx(4.2, rel=1e-9)
