import numpy as np
import pytest
import torch

from gsedit.cameras import look_at
from gsedit.errors import MaskMisaligned
from gsedit.rasterizer import (
    COV2D_FLOOR,
    TensorScene,
    project,
    render,
    render_masked,
    render_silhouette,
    render_tensor,
)
from gsedit.scene import GaussianCloud, activate
from gsedit.selector import EditMask

from conftest import front_camera, make_cloud, random_test_scene, single_gaussian_cloud


class TestProject:
    def test_on_axis_closed_form(self):
        sigma, d = 0.3, 5.0
        cam = front_camera()
        g = activate(single_gaussian_cloud(sigma=sigma).primitives[0])
        s = project(g, cam)
        np.testing.assert_allclose(s.mean, [cam.cx, cam.cy], atol=1e-12)
        expect = np.diag([(cam.fx * sigma / d) ** 2,
                          (cam.fy * sigma / d) ** 2]) + COV2D_FLOOR * np.eye(2)
        np.testing.assert_allclose(s.cov2d, expect, rtol=1e-12)
        assert s.depth == pytest.approx(d)

    def test_behind_camera_culled(self):
        cam = front_camera()
        g = activate(single_gaussian_cloud(position=(0, 0, -10)).primitives[0])
        assert project(g, cam) is None

    def test_far_off_axis_culled(self):
        cam = front_camera()
        g = activate(single_gaussian_cloud(position=(50.0, 0, 0), sigma=0.05).primitives[0])
        assert project(g, cam) is None

    def test_cov2d_matches_finite_difference_jacobian(self, rng):
        # Oracle: numerically differentiate the full world->pixel map and
        # build J Sigma_world J^T from scratch.
        for trial in range(5):
            cloud, _, cam = random_test_scene(rng, 1, with_field=False)
            g = activate(cloud.primitives[0])
            s = project(g, cam)

            def pix(p):
                pc = cam.rotation @ p + cam.translation
                return np.array([cam.fx * pc[0] / pc[2] + cam.cx,
                                 cam.fy * pc[1] / pc[2] + cam.cy])

            h = 1e-6
            jac = np.zeros((2, 3))
            for k in range(3):
                dp = np.zeros(3)
                dp[k] = h
                jac[:, k] = (pix(g.position + dp) - pix(g.position - dp)) / (2 * h)
            w, x, y, z = g.rotation
            rot = np.array([
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ])
            sigma_world = rot @ np.diag(g.scale ** 2) @ rot.T
            oracle = jac @ sigma_world @ jac.T
            np.testing.assert_allclose(s.cov2d - COV2D_FLOOR * np.eye(2), oracle,
                                       rtol=1e-4)


class TestRender:
    def test_empty_cloud_is_background(self):
        cam = front_camera(width=8, height=6)
        img = render(GaussianCloud(), None, cam, background=(0.2, 0.4, 0.6))
        assert np.all(img.pixels == np.array([0.2, 0.4, 0.6]))

    def test_single_splat_center_pixel_closed_form(self):
        # 33x33 viewport puts a pixel exactly at the principal point, where
        # the Gaussian kernel evaluates to 1: pixel = opacity * color on black.
        cloud = single_gaussian_cloud(opacity_logit=0.0, color_raw=(0.8, -0.3, 0.1))
        cam = front_camera(33, 33)
        img = render(cloud, None, cam, background=(0.0, 0.0, 0.0))
        a = activate(cloud.primitives[0])
        np.testing.assert_allclose(img.pixels[16, 16], 0.5 * a.color, rtol=1e-12)

    def test_transparent_cloud_is_background(self, rng):
        cloud, field, cam = random_test_scene(rng, 4)
        for g in cloud.primitives:
            g.opacity_logit = -40.0
        img = render(cloud, field, cam, background=(0.3, 0.3, 0.3))
        assert np.abs(img.pixels - 0.3).max() < 1e-6

    def test_storage_order_permutation_invariant(self, rng):
        cloud, field, cam = random_test_scene(rng, 5)
        img_a = render(cloud, field, cam)
        shuffled = GaussianCloud(
            primitives=[cloud.primitives[i] for i in rng.permutation(len(cloud))],
            next_id=cloud.next_id,
        )
        img_b = render(shuffled, field, cam)
        np.testing.assert_array_equal(img_a.pixels, img_b.pixels)

    def test_equal_depth_ties_break_by_id(self):
        # Two coincident splats: composition order must follow id, not storage.
        entries = [
            ((0, 0, 0), np.log([0.3] * 3), (1, 0, 0, 0), 3.0, (4.0, -4.0, -4.0)),
            ((0, 0, 0), np.log([0.3] * 3), (1, 0, 0, 0), 3.0, (-4.0, 4.0, -4.0)),
        ]
        cam = front_camera(17, 17)
        a = render(make_cloud(entries), None, cam)
        swapped = make_cloud(entries[::-1])
        swapped.primitives[0].id, swapped.primitives[1].id = 1, 0
        b = render(swapped, None, cam)
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_output_and_transmittance_in_unit_range(self, rng):
        for _ in range(3):
            cloud, field, cam = random_test_scene(rng, 5)
            ts = TensorScene.from_cloud(cloud, field)
            with torch.no_grad():
                img = render_tensor(ts, cam, (1.0, 1.0, 1.0))
            arr = img.numpy()
            assert arr.min() >= 0.0 and arr.max() <= 1.0

    def test_deterministic_rerender(self, rng):
        cloud, field, cam = random_test_scene(rng, 4)
        a = render(cloud, field, cam)
        b = render(cloud, field, cam)
        np.testing.assert_array_equal(a.pixels, b.pixels)


def two_disjoint_blobs():
    # blob A sits at world +x, which the front camera maps to the left half
    return make_cloud([
        ((0.8, 0.0, 0.0), np.log([0.2] * 3), (1, 0, 0, 0), 1.5, (2.0, -2.0, -2.0)),
        ((-0.8, 0.0, 0.0), np.log([0.2] * 3), (1, 0, 0, 0), 1.5, (-2.0, 2.0, -2.0)),
    ])


class TestRenderMasked:
    def test_all_ones_equals_render(self, rng):
        cloud, field, cam = random_test_scene(rng, 4)
        mask = EditMask.uniform(cloud, label=1)
        a = render_masked(cloud, field, mask, cam)
        b = render(cloud, field, cam)
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_all_zeros_is_background(self, rng):
        cloud, field, cam = random_test_scene(rng, 3)
        mask = EditMask.uniform(cloud, label=0)
        img = render_masked(cloud, field, mask, cam, background=(0.1, 0.2, 0.3))
        assert np.all(img.pixels == np.array([0.1, 0.2, 0.3]))

    def test_keep_one_equals_singleton_render(self):
        cloud = two_disjoint_blobs()
        cam = front_camera()
        mask = EditMask.from_labels(cloud.ids(), np.array([1, 0]))
        a = render_masked(cloud, None, mask, cam)
        singleton = GaussianCloud(primitives=[cloud.primitives[0].copy()], next_id=1)
        b = render(singleton, None, cam)
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_soft_keep_scales_opacity(self):
        cloud = single_gaussian_cloud(opacity_logit=0.0, color_raw=(2.0, 2.0, 2.0))
        cam = front_camera(33, 33)
        mask = EditMask.uniform(cloud, label=1)
        img = render_masked(cloud, None, mask, cam, soft_keep=np.array([0.5]))
        a = activate(cloud.primitives[0])
        np.testing.assert_allclose(img.pixels[16, 16], 0.25 * a.color, rtol=1e-12)

    def test_misaligned_mask_rejected(self, rng):
        cloud, field, cam = random_test_scene(rng, 3)
        mask = EditMask.from_labels(np.array([5, 6]), np.array([1, 1]))
        with pytest.raises(MaskMisaligned):
            render_masked(cloud, field, mask, cam)


class TestSilhouette:
    def test_silhouette_covers_blob(self):
        cloud = two_disjoint_blobs()
        cam = front_camera(64, 64)
        mask = EditMask.from_labels(cloud.ids(), np.array([1, 0]))
        sil = render_silhouette(cloud, None, mask, cam)
        full = render_silhouette(cloud, None, EditMask.uniform(cloud, 1), cam)
        assert sil.sum() > 0
        assert sil.sum() < full.sum()
        # blob A is on the left half of the image
        assert sil[:, : 32].sum() > sil[:, 32:].sum()
