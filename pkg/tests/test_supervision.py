import numpy as np
import pytest

from gsedit.errors import DimensionMismatch, MalformedResponse, ServiceUnavailable, Timeout
from gsedit.images import ImageBuffer
from gsedit.planner import AtomicTask, TaskCategory
from gsedit.supervision import (
    CloudSceneView,
    DatasetEntry,
    EditOracleSpec,
    IdentityOracle,
    SyntheticOracle,
    build_dataset,
    idu_refresh,
    make_oracle,
    remote_edit,
    synthetic_edit,
)

from conftest import front_camera
from mockserver import MockService
from test_rasterizer import two_disjoint_blobs


def task(category, prompt="Repaint the thing red"):
    return AtomicTask(category, prompt)


class TestSyntheticEdit:
    def test_recolor_blue_to_red_total(self):
        img = ImageBuffer.solid(8, 8, (0.0, 0.0, 1.0))
        out = synthetic_edit(img, task(TaskCategory.COLOR_ADJUSTMENT,
                                       "Repaint the wall red"),
                             np.ones((8, 8)))
        np.testing.assert_allclose(out.pixels, np.broadcast_to([1.0, 0.0, 0.0],
                                                               (8, 8, 3)))

    def test_empty_region_is_identity_for_local_categories(self, rng):
        img = ImageBuffer.from_array(rng.uniform(size=(6, 7, 3)))
        zeros = np.zeros((6, 7))
        for cat in (TaskCategory.COLOR_ADJUSTMENT, TaskCategory.TEXTURE_REPLACEMENT,
                    TaskCategory.MATERIAL_PROPERTIES,
                    TaskCategory.LOCAL_GEOMETRY_MODIFICATION,
                    TaskCategory.CATEGORY_SWAPPING):
            out = synthetic_edit(img, task(cat), zeros)
            np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_style_identity_matrix_is_identity(self, rng):
        img = ImageBuffer.from_array(rng.uniform(size=(5, 5, 3)))
        out = synthetic_edit(img, task(TaskCategory.STYLE_TRANSFER, "Keep style"),
                             np.ones((5, 5)), style_matrix=np.eye(3))
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_style_is_global(self, rng):
        img = ImageBuffer.from_array(rng.uniform(0.2, 0.8, size=(5, 5, 3)))
        out = synthetic_edit(img, task(TaskCategory.STYLE_TRANSFER, "Sepia style"),
                             np.zeros((5, 5)))
        assert np.any(out.pixels != img.pixels)

    def test_background_replaces_outside_region(self, rng):
        img = ImageBuffer.from_array(rng.uniform(size=(8, 8, 3)))
        region = np.zeros((8, 8))
        region[2:6, 2:6] = 1.0
        out = synthetic_edit(img, task(TaskCategory.BACKGROUND_EDITING,
                                       "Set the background to a forest"), region)
        np.testing.assert_array_equal(out.pixels[2:6, 2:6], img.pixels[2:6, 2:6])
        assert np.any(out.pixels[0, 0] != img.pixels[0, 0])

    def test_sprite_lands_inside_region(self, rng):
        img = ImageBuffer.solid(16, 16, (0.5, 0.5, 0.5))
        region = np.zeros((16, 16))
        region[4:12, 4:12] = 1.0
        out = synthetic_edit(img, task(TaskCategory.CATEGORY_SWAPPING,
                                       "Turn the cat into a fox"), region)
        changed = np.any(out.pixels != img.pixels, axis=2)
        assert changed.any()
        assert not changed[region < 0.5].any()

    def test_pure_function(self, rng):
        img = ImageBuffer.from_array(rng.uniform(size=(9, 9, 3)))
        region = (rng.uniform(size=(9, 9)) > 0.5).astype(float)
        t = task(TaskCategory.TEXTURE_REPLACEMENT, "Replace the floor with marble")
        a = synthetic_edit(img, t, region, seed=5)
        b = synthetic_edit(img, t, region, seed=5)
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_region_shape_checked(self, rng):
        img = ImageBuffer.from_array(rng.uniform(size=(6, 6, 3)))
        with pytest.raises(DimensionMismatch):
            synthetic_edit(img, task(TaskCategory.COLOR_ADJUSTMENT), np.ones((3, 3)))


class TestRemoteEdit:
    def test_echo_round_trip(self, rng):
        grid = ImageBuffer.from_array(
            np.rint(rng.uniform(size=(8, 8, 3)) * 255) / 255)
        with MockService() as svc:
            out = remote_edit(grid, "make it pop", svc.url, timeout=5)
        np.testing.assert_array_equal(out.pixels, grid.pixels)

    def test_wrong_dimensions_rejected(self, rng):
        grid = ImageBuffer.from_array(rng.uniform(size=(8, 8, 3)))
        with MockService() as svc:
            svc.edit_mode = "wrong-size"
            with pytest.raises(MalformedResponse):
                remote_edit(grid, "p", svc.url, timeout=5)

    def test_color_matrix_matches_local_application(self, rng):
        # 8-bit-exact pixels so PNG transport is lossless either way
        grid = ImageBuffer.from_array(
            np.rint(rng.uniform(size=(6, 6, 3)) * 255) / 255)
        matrix = np.array([[0.5, 0.25, 0.25],
                           [0.0, 1.0, 0.0],
                           [0.2, 0.0, 0.8]])
        with MockService() as svc:
            svc.edit_mode = "matrix"
            svc.matrix = matrix
            out = remote_edit(grid, "p", svc.url, timeout=5)
        local = np.rint(np.clip(grid.pixels @ matrix.T, 0, 1) * 255) / 255
        np.testing.assert_allclose(out.pixels, local, atol=1e-12)

    def test_timeout_after_retries(self, rng):
        grid = ImageBuffer.from_array(rng.uniform(size=(4, 4, 3)))
        with MockService() as svc:
            svc.edit_mode = "sleep"
            svc.delay = 1.0
            with pytest.raises(Timeout):
                remote_edit(grid, "p", svc.url, timeout=0.1, retries=2,
                            backoff=0.01)

    def test_unreachable_service(self, rng):
        grid = ImageBuffer.from_array(rng.uniform(size=(4, 4, 3)))
        with pytest.raises(ServiceUnavailable):
            remote_edit(grid, "p", "http://127.0.0.1:9", timeout=0.3,
                        retries=2, backoff=0.01)

    def test_retry_then_success(self, rng):
        grid = ImageBuffer.from_array(
            np.rint(rng.uniform(size=(4, 4, 3)) * 255) / 255)
        with MockService() as svc:
            svc.failures = 2
            out = remote_edit(grid, "p", svc.url, timeout=5, retries=3,
                              backoff=0.01)
        np.testing.assert_array_equal(out.pixels, grid.pixels)

    def test_response_cache(self, tmp_path, rng):
        grid = ImageBuffer.from_array(
            np.rint(rng.uniform(size=(4, 4, 3)) * 255) / 255)
        with MockService() as svc:
            a = remote_edit(grid, "p", svc.url, timeout=5, cache_dir=tmp_path)
            n_after_first = len(svc.requests)
            b = remote_edit(grid, "p", svc.url, timeout=5, cache_dir=tmp_path)
            assert len(svc.requests) == n_after_first  # served from cache
        np.testing.assert_array_equal(a.pixels, b.pixels)


def toy_dataset(n_views=4, width=32, height=32):
    cloud = two_disjoint_blobs()
    view = CloudSceneView(cloud, None)
    from gsedit.cameras import orbit_rig
    cams = orbit_rig(n_views, radius=5.0, width=width, height=height)
    return cloud, view, build_dataset(view, cams)


class TestIduRefresh:
    def test_schedule_gate_blocks_fresh_entries(self, rng):
        _, view, ds = toy_dataset()
        for e in ds.entries:
            e.last_refresh = 0
        before = [e.target.pixels.copy() for e in ds.entries]
        idu_refresh(ds, IdentityOracle(), view, iteration=5, period=10,
                    rng=np.random.default_rng(0))
        for e, old in zip(ds.entries, before):
            np.testing.assert_array_equal(e.target.pixels, old)

    def test_identity_oracle_targets_equal_renders(self):
        _, view, ds = toy_dataset()
        idu_refresh(ds, IdentityOracle(), view, iteration=0, period=10,
                    rng=np.random.default_rng(0))
        for e in ds.entries:
            np.testing.assert_array_equal(e.target.pixels,
                                          view.render(e.camera).pixels)
            assert e.last_refresh == 0

    def test_recolor_oracle_composes_with_local_edit(self):
        _, view, ds = toy_dataset()
        t = task(TaskCategory.COLOR_ADJUSTMENT, "Repaint everything red")
        oracle = SyntheticOracle(t, seed=3)
        idu_refresh(ds, oracle, view, iteration=0, period=10,
                    rng=np.random.default_rng(0))
        for e in ds.entries:
            expected = synthetic_edit(view.render(e.camera), t,
                                      np.ones((e.camera.height, e.camera.width)),
                                      seed=3)
            np.testing.assert_allclose(e.target.pixels, expected.pixels,
                                       atol=1e-12)

    def test_entry_count_and_cameras_preserved(self):
        _, view, ds = toy_dataset()
        cams = [e.camera for e in ds.entries]
        idu_refresh(ds, IdentityOracle(), view, iteration=0, period=5,
                    rng=np.random.default_rng(1))
        assert len(ds) == 4
        assert all(a is b for a, b in zip(cams, (e.camera for e in ds.entries)))

    def test_failed_refresh_keeps_previous_target(self, rng):
        _, view, ds = toy_dataset()
        before = [e.target.pixels.copy() for e in ds.entries]

        class FailingOracle:
            def edit_grid(self, grid, region_mask=None):
                raise ServiceUnavailable("down")

        with pytest.raises(ServiceUnavailable):
            idu_refresh(ds, FailingOracle(), view, iteration=0, period=10,
                        rng=np.random.default_rng(0))
        for e, old in zip(ds.entries, before):
            np.testing.assert_array_equal(e.target.pixels, old)
            assert e.last_refresh < 0


class TestOracleSpec:
    def test_remote_requires_endpoint(self):
        with pytest.raises(ValueError):
            EditOracleSpec(kind="remote", task=task(TaskCategory.COLOR_ADJUSTMENT))

    def test_factory_kinds(self):
        t = task(TaskCategory.COLOR_ADJUSTMENT)
        assert make_oracle(EditOracleSpec("synthetic", task=t)).kind == "synthetic"
        assert make_oracle(EditOracleSpec("identity")).kind == "identity"
        remote = make_oracle(EditOracleSpec("remote", task=t,
                                            endpoint="http://x"))
        assert remote.kind == "remote" and remote.prompt == t.prompt
