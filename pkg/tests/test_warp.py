import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from warpuq import (
    DisplacementField,
    GridSpec,
    GridMismatchError,
    LabelVolume,
    SampleSet,
    ScalarVolume,
    argmax_discretize,
    mean_warped_labels,
    warp_labels,
    warp_scalar,
)

from conftest import naive_warp, random_field, random_labels, random_volume


def constant_field(grid, ux, uy, uz):
    data = np.empty((3,) + grid.shape)
    data[0] = ux
    data[1] = uy
    data[2] = uz
    return DisplacementField(grid, data)


class TestWarpScalar:
    def test_identity_bit_exact(self, grid8):
        src = random_volume(grid8, 1)
        out = warp_scalar(src, constant_field(grid8, 0, 0, 0))
        assert np.array_equal(out.data, src.data)

    def test_integer_shift_interior(self, grid8):
        src = random_volume(grid8, 2)
        out = warp_scalar(src, constant_field(grid8, 1, 0, 0))
        # out(x, y, z) = src(x + 1, y, z) away from the +x face
        assert np.array_equal(out.data[:, :, :-1], src.data[:, :, 1:])

    def test_half_voxel_shift_interior(self, grid8):
        src = random_volume(grid8, 3)
        out = warp_scalar(src, constant_field(grid8, 0.5, 0, 0))
        expected = 0.5 * src.data[:, :, :-1] + 0.5 * src.data[:, :, 1:]
        np.testing.assert_allclose(out.data[:, :, :-1], expected, atol=1e-12)

    def test_clamps_to_edge(self, grid4):
        src = random_volume(grid4, 4)
        out = warp_scalar(src, constant_field(grid4, 10, 0, 0))
        expected = np.repeat(src.data[:, :, -1:], 4, axis=2)
        np.testing.assert_allclose(out.data, expected, atol=0)

    def test_grid_mismatch(self, grid4, grid8):
        src = random_volume(grid4, 5)
        with pytest.raises(GridMismatchError):
            warp_scalar(src, constant_field(grid8, 0, 0, 0))

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_naive_oracle(self, seed):
        rng = np.random.default_rng(1000 + seed)
        dims = tuple(int(d) for d in rng.integers(3, 9, size=3))
        grid = GridSpec(dims)
        src = ScalarVolume(grid, rng.random(grid.shape))
        field = DisplacementField(grid, rng.uniform(-3, 3, (3,) + grid.shape))
        out = warp_scalar(src, field)
        np.testing.assert_allclose(out.data, naive_warp(src.data, field.data), atol=1e-6)

    def test_linearity(self, grid8):
        v1 = random_volume(grid8, 6)
        v2 = random_volume(grid8, 7)
        field = random_field(grid8, 8)
        a, b = 0.3, -1.7
        combo = ScalarVolume(grid8, a * v1.data + b * v2.data)
        lhs = warp_scalar(combo, field).data
        rhs = a * warp_scalar(v1, field).data + b * warp_scalar(v2, field).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestWarpLabels:
    def test_identity(self, grid8):
        src = random_labels(grid8, 10)
        out = warp_labels(src, constant_field(grid8, 0, 0, 0))
        assert np.array_equal(out.data, src.data)

    def test_half_voxel_boundary_becomes_half(self, grid8):
        # A binary slab occupying x < 4, shifted by half a voxel across the face.
        data = np.zeros((1,) + grid8.shape)
        data[0, :, :, :4] = 1.0
        src = LabelVolume(grid8, data, binary=True)
        out = warp_labels(src, constant_field(grid8, 0.5, 0, 0))
        assert np.all(out.data[0, :, :, 3] == 0.5)
        assert np.all(out.data[0, :, :, :3] == 1.0)
        assert np.all(out.data[0, :, :, 4:] == 0.0)

    def test_matches_per_channel_scalar_warp(self, grid8):
        src = random_labels(grid8, 11, channels=3)
        field = random_field(grid8, 12)
        out = warp_labels(src, field)
        for c in range(3):
            chan = warp_scalar(ScalarVolume(grid8, src.data[c]), field)
            np.testing.assert_allclose(out.data[c], chan.data, atol=1e-12)

    def test_sphere_label_against_oracle(self):
        grid = GridSpec((8, 8, 8))
        x, y, z = np.meshgrid(np.arange(8), np.arange(8), np.arange(8), indexing="ij")
        sphere = ((x - 3.5) ** 2 + (y - 3.5) ** 2 + (z - 3.5) ** 2 <= 9.0).astype(float)
        src = LabelVolume(grid, sphere[np.newaxis], binary=True)
        field = random_field(grid, 13, scale=1.5)
        out = warp_labels(src, field)
        expected = np.clip(naive_warp(src.data[0], field.data), 0.0, 1.0)
        np.testing.assert_allclose(out.data[0], expected, atol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=10_000))
    def test_range_preserved_under_fuzzed_fields(self, seed):
        rng = np.random.default_rng(seed)
        grid = GridSpec((5, 5, 5))
        src = LabelVolume(grid, rng.random((2,) + grid.shape))
        field = DisplacementField(grid, rng.uniform(-6, 6, (3,) + grid.shape))
        out = warp_labels(src, field)
        assert out.data.min() >= 0.0
        assert out.data.max() <= 1.0

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=10_000))
    def test_partition_of_unity(self, seed):
        # Channels plus implicit background sum to 1 before and after warping.
        rng = np.random.default_rng(seed)
        grid = GridSpec((6, 6, 6))
        raw = rng.random((3,) + grid.shape)
        raw /= raw.sum(axis=0) * rng.uniform(1.0, 2.0)  # leaves positive background
        src = LabelVolume(grid, raw)
        field = DisplacementField(grid, rng.uniform(-2, 2, (3,) + grid.shape))
        warped = warp_labels(src, field)
        bg = LabelVolume(grid, (1.0 - raw.sum(axis=0))[np.newaxis])
        warped_bg = warp_labels(bg, field)
        total = warped.data.sum(axis=0) + warped_bg.data[0]
        np.testing.assert_allclose(total, 1.0, atol=1e-6)


class TestArgmaxDiscretize:
    def _labels(self, grid, *channel_values):
        data = np.zeros((len(channel_values),) + grid.shape)
        for c, v in enumerate(channel_values):
            data[c].fill(v)
        return LabelVolume(grid, data)

    def test_clear_max(self, grid4):
        out = argmax_discretize(self._labels(grid4, 0.7, 0.2))
        assert np.all(out.data[0] == 1.0)
        assert np.all(out.data[1] == 0.0)

    def test_background_max(self, grid4):
        out = argmax_discretize(self._labels(grid4, 0.3, 0.3))
        assert np.all(out.data == 0.0)

    def test_tie_breaks_to_lowest_channel(self, grid4):
        out = argmax_discretize(self._labels(grid4, 0.5, 0.5))
        assert np.all(out.data[0] == 1.0)
        assert np.all(out.data[1] == 0.0)

    def test_background_wins_tie_against_structure(self, grid4):
        out = argmax_discretize(self._labels(grid4, 0.5, 0.0))
        assert np.all(out.data == 0.0)

    def test_explicit_background_channel(self, grid4):
        out = argmax_discretize(self._labels(grid4, 0.2, 0.5, 0.3), background_channel=0)
        assert np.all(out.data[1] == 1.0)
        assert np.all(out.data[0] == 0.0)
        assert out.binary


class TestMeanWarpedLabels:
    def test_single_sample_equals_warp(self, grid8):
        src = random_labels(grid8, 20)
        field = random_field(grid8, 21)
        mean = mean_warped_labels(src, SampleSet((field,)))
        assert np.array_equal(mean.data, warp_labels(src, field).data)

    def test_two_identical_fields(self, grid8):
        src = random_labels(grid8, 22)
        field = random_field(grid8, 23)
        mean = mean_warped_labels(src, SampleSet((field, field)))
        assert np.array_equal(mean.data, warp_labels(src, field).data)

    def test_opposed_shifts_average_to_half(self, grid8):
        data = np.zeros((1,) + grid8.shape)
        data[0, :, :, :4] = 1.0
        src = LabelVolume(grid8, data, binary=True)
        plus = constant_field(grid8, 1, 0, 0)
        minus = constant_field(grid8, -1, 0, 0)
        mean = mean_warped_labels(src, SampleSet((plus, minus)))
        # Explicit two-sample average oracle.
        expected = 0.5 * (
            warp_labels(src, plus).data + warp_labels(src, minus).data
        )
        np.testing.assert_allclose(mean.data, expected, atol=0)
        assert np.all(mean.data[0, :, :, 3] == 0.5)
        assert np.all(mean.data[0, :, :, 4] == 0.5)
