import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsedit.errors import DimensionMismatch
from gsedit.images import ImageBuffer, assemble_grid, split_grid


def rand_frame(rng, w=6, h=4):
    return ImageBuffer.from_array(rng.uniform(size=(h, w, 3)))


class TestImageBuffer:
    def test_shape_validation(self):
        with pytest.raises(DimensionMismatch):
            ImageBuffer(width=4, height=4, pixels=np.zeros((3, 4, 3)))

    def test_png_round_trip_8bit(self, tmp_path, rng):
        img = rand_frame(rng, 8, 5)
        p = tmp_path / "x.png"
        img.save_png(p)
        back = ImageBuffer.load_png(p)
        assert back.width == 8 and back.height == 5
        # 8-bit quantization error only
        assert np.abs(back.pixels - img.pixels).max() <= 0.5 / 255 + 1e-12

    def test_raw_round_trip_float32_exact(self, tmp_path, rng):
        img = rand_frame(rng)
        p = tmp_path / "x.npy"
        img.save_raw(p)
        back = ImageBuffer.load_raw(p)
        np.testing.assert_array_equal(back.pixels,
                                      img.pixels.astype(np.float32).astype(np.float64))


class TestGrid:
    def test_solid_frames_tile_to_solid(self):
        frames = [ImageBuffer.solid(3, 2, (0.25, 0.5, 0.75)) for _ in range(4)]
        grid = assemble_grid(frames)
        assert grid.width == 6 and grid.height == 4
        assert np.all(grid.pixels == np.array([0.25, 0.5, 0.75]))

    def test_quadrant_placement_row_major(self, rng):
        frames = [rand_frame(rng, 2, 2) for _ in range(4)]
        grid = assemble_grid(frames).pixels
        np.testing.assert_array_equal(grid[:2, :2], frames[0].pixels)
        np.testing.assert_array_equal(grid[:2, 2:], frames[1].pixels)
        np.testing.assert_array_equal(grid[2:, :2], frames[2].pixels)
        np.testing.assert_array_equal(grid[2:, 2:], frames[3].pixels)

    def test_dimension_mismatch(self, rng):
        frames = [rand_frame(rng, 2, 2) for _ in range(3)] + [rand_frame(rng, 3, 2)]
        with pytest.raises(DimensionMismatch):
            assemble_grid(frames)

    @settings(max_examples=30, deadline=None)
    @given(w=st.integers(1, 9), h=st.integers(1, 9), seed=st.integers(0, 2**16))
    def test_split_inverts_assemble(self, w, h, seed):
        r = np.random.default_rng(seed)
        frames = [rand_frame(r, w, h) for _ in range(4)]
        back = split_grid(assemble_grid(frames))
        for a, b in zip(back, frames):
            np.testing.assert_array_equal(a.pixels, b.pixels)
