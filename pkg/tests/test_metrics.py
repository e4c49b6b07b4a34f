import math
import os
from itertools import permutations

import numpy as np
import pytest

from warpuq import (
    DegenerateCorrelationError,
    DisplacementField,
    GridSpec,
    LabelVolume,
    SampleSet,
    UncertaintyKind,
    UncertaintyMap,
    VolumeError,
    dice,
    evaluate_all,
    jacobian_determinant,
    label_propagation_error,
    non_diffeomorphic_volume,
    pearson_r,
    percent_nonpositive_jacobian,
    read_report_csv,
    write_report_csv,
)

from conftest import random_field, random_volume


def field_of(grid, ux=0.0, uy=0.0, uz=0.0):
    data = np.empty((3,) + grid.shape)
    data[0] = ux
    data[1] = uy
    data[2] = uz
    return DisplacementField(grid, data)


def cube_labels(grid, x0, x1):
    data = np.zeros((1,) + grid.shape)
    data[0, :, :, x0:x1] = 1.0
    return LabelVolume(grid, data, binary=True)


class TestDice:
    def test_identical_masks(self, grid8):
        a = cube_labels(grid8, 0, 4)
        assert dice(a, a).per_structure == (1.0,)

    def test_half_overlapping_cubes(self):
        # Two 4x4x4 cubes sharing a 2x4x4 slab: dice = 2*32/(64+64) = 0.5.
        grid = GridSpec((8, 4, 4))
        a = cube_labels(grid, 0, 4)
        b = cube_labels(grid, 2, 6)
        result = dice(a, b)
        assert result.per_structure == (0.5,)
        assert result.mean == 0.5

    def test_empty_vs_empty_is_one(self, grid4):
        empty = cube_labels(grid4, 0, 0)
        assert dice(empty, empty).per_structure == (1.0,)

    def test_empty_vs_nonempty_is_zero(self, grid4):
        assert dice(cube_labels(grid4, 0, 0), cube_labels(grid4, 0, 2)).per_structure == (0.0,)

    def test_symmetric(self, grid8):
        a = cube_labels(grid8, 0, 5)
        b = cube_labels(grid8, 3, 8)
        assert dice(a, b) == dice(b, a)

    def test_rejects_soft_labels(self, grid4):
        soft = LabelVolume(grid4, np.full((1,) + grid4.shape, 0.5))
        with pytest.raises(VolumeError):
            dice(soft, soft)


class TestJacobianDeterminant:
    def test_zero_field_is_identity(self, grid8):
        det = jacobian_determinant(field_of(grid8))
        np.testing.assert_allclose(det.data, 1.0, atol=0)

    def test_affine_expansion(self):
        # u = 0.5 * position per axis -> phi = 1.5 p -> det 1.5^3 = 3.375.
        grid = GridSpec((8, 8, 8))
        x = np.arange(8.0)
        data = np.empty((3,) + grid.shape)
        data[0] = 0.5 * x.reshape(1, 1, 8)
        data[1] = 0.5 * x.reshape(1, 8, 1)
        data[2] = 0.5 * x.reshape(8, 1, 1)
        det = jacobian_determinant(DisplacementField(grid, data))
        np.testing.assert_allclose(det.data, 3.375, atol=1e-9)

    def test_constructed_fold_matches_brute_force(self):
        grid = GridSpec((6, 6, 6))
        rng = np.random.default_rng(3)
        data = rng.uniform(-2.0, 2.0, (3,) + grid.shape)
        field = DisplacementField(grid, data)
        det = jacobian_determinant(field).data

        # Brute-force oracle: np.gradient per component, explicit 3x3 dets
        # via numpy.linalg on each voxel.
        u = field.data
        grads = [np.gradient(u[c]) for c in range(3)]  # each (dz, dy, dx)
        brute = np.empty(grid.shape)
        for z in range(6):
            for y in range(6):
                for x in range(6):
                    jac = np.eye(3)
                    for comp in range(3):
                        jac[comp, 0] += grads[comp][2][z, y, x]
                        jac[comp, 1] += grads[comp][1][z, y, x]
                        jac[comp, 2] += grads[comp][0][z, y, x]
                    brute[z, y, x] = np.linalg.det(jac)
        np.testing.assert_allclose(det, brute, atol=1e-9)
        assert det.min() <= 0  # amplitude 2 uniform noise folds

    def test_translation_composition_keeps_unit_det(self, grid8):
        det = jacobian_determinant(field_of(grid8, ux=2.0, uy=-1.0, uz=0.5))
        np.testing.assert_allclose(det.data, 1.0, atol=0)

    def test_requires_three_voxels_per_axis(self):
        with pytest.raises(VolumeError):
            jacobian_determinant(field_of(GridSpec((2, 4, 4))))


class TestPercentNonpositive:
    def test_zero_field(self, grid8):
        assert percent_nonpositive_jacobian(field_of(grid8)) == 0.0

    def test_global_reflection(self):
        # u_x = nx - 1 - 2x maps x -> nx - 1 - x; det -1 everywhere.
        grid = GridSpec((8, 8, 8))
        data = np.zeros((3,) + grid.shape)
        data[0] = (7.0 - 2.0 * np.arange(8.0)).reshape(1, 1, 8)
        assert percent_nonpositive_jacobian(DisplacementField(grid, data)) == 100.0

    def test_smooth_phantom_field(self):
        from warpuq import RandomFieldSpec, generate_smooth_field

        field = generate_smooth_field(
            RandomFieldSpec(GridSpec((12, 12, 12)), amplitude=1.5, smoothness=4.0, seed=5)
        )
        assert percent_nonpositive_jacobian(field) == 0.0


def ndv_oracle(field):
    """Exhaustive tetrahedron oracle: loop every cell and every Kuhn
    tetrahedron, accumulating negative signed volumes via numpy.linalg.det."""
    nz, ny, nx = field.grid.shape
    u = field.data
    phi = np.empty((nz, ny, nx, 3))
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                phi[z, y, x] = (
                    x + u[0, z, y, x],
                    y + u[1, z, y, x],
                    z + u[2, z, y, x],
                )
    negative = 0.0
    for perm in permutations(range(3)):
        sign = 1.0
        p = list(perm)
        for i in range(3):
            for k in range(i + 1, 3):
                if p[i] > p[k]:
                    sign = -sign
        offsets = [np.zeros(3, dtype=int)]
        for axis in perm:
            nxt = offsets[-1].copy()
            nxt[axis] += 1
            offsets.append(nxt)
        for z in range(nz - 1):
            for y in range(ny - 1):
                for x in range(nx - 1):
                    corners = [
                        phi[z + o[2], y + o[1], x + o[0]] for o in offsets
                    ]
                    e = np.stack([corners[i] - corners[0] for i in (1, 2, 3)], axis=1)
                    vol = sign * np.linalg.det(e) / 6.0
                    if vol < 0:
                        negative += -vol
    return 100.0 * negative / ((nx - 1) * (ny - 1) * (nz - 1))


class TestNonDiffeomorphicVolume:
    def test_zero_field(self, grid8):
        assert non_diffeomorphic_volume(field_of(grid8)) == 0.0

    def test_positive_affine(self):
        grid = GridSpec((6, 6, 6))
        data = np.empty((3,) + grid.shape)
        x = np.arange(6.0)
        data[0] = 0.5 * x.reshape(1, 1, 6)
        data[1] = 0.5 * x.reshape(1, 6, 1)
        data[2] = 0.5 * x.reshape(6, 1, 1)
        assert non_diffeomorphic_volume(DisplacementField(grid, data)) == 0.0

    def test_two_cell_fold_matches_oracle(self):
        # Collapse one cell's x-extent to width -0.5 by pulling its +x face
        # behind its -x face.
        grid = GridSpec((4, 4, 4))
        data = np.zeros((3,) + grid.shape)
        data[0, :, :, 1] = -1.5
        field = DisplacementField(grid, data)
        got = non_diffeomorphic_volume(field)
        want = ndv_oracle(field)
        assert got > 0
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_random_fold_matches_oracle(self):
        grid = GridSpec((5, 4, 4))
        rng = np.random.default_rng(11)
        field = DisplacementField(grid, rng.uniform(-1.5, 1.5, (3,) + grid.shape))
        np.testing.assert_allclose(
            non_diffeomorphic_volume(field), ndv_oracle(field), atol=1e-9
        )

    def test_consistent_with_positive_jacobian_on_smooth_fields(self):
        from warpuq import RandomFieldSpec, generate_smooth_field

        grid = GridSpec((10, 10, 10))
        checked = 0
        for seed in range(100):
            field = generate_smooth_field(
                RandomFieldSpec(grid, amplitude=1.25, smoothness=3.0, seed=seed)
            )
            if jacobian_determinant(field).data.min() > 0:
                checked += 1
                assert non_diffeomorphic_volume(field) == 0.0
        assert checked >= 90


class TestLabelPropagationError:
    def test_identity_zero(self, grid8):
        labels = cube_labels(grid8, 0, 4)
        err = label_propagation_error(labels, labels, SampleSet((field_of(grid8),)))
        assert np.all(err == 0.0)

    def test_half_probability_squared(self, grid4):
        soft = LabelVolume(grid4, np.full((1,) + grid4.shape, 0.5))
        target = LabelVolume(grid4, np.ones((1,) + grid4.shape), binary=True)
        err = label_propagation_error(soft, target, SampleSet((field_of(grid4),)))
        np.testing.assert_allclose(err, 0.25, atol=0)

    def test_ground_truth_pair_has_small_error(self):
        from warpuq import PhantomSpec, RandomFieldSpec, Structure, make_ground_truth_pair

        grid = GridSpec((16, 16, 16))
        phantom = PhantomSpec(
            grid, (Structure.sphere((7.5, 7.5, 7.5), 4, 1.0, 0),), noise_sigma=0.0, seed=0
        )
        fixed, moving, labels_fixed, labels_moving, true_field = make_ground_truth_pair(
            phantom, RandomFieldSpec(grid, amplitude=1.5, smoothness=4.0, seed=3)
        )
        err = label_propagation_error(labels_moving, labels_fixed, SampleSet((true_field,)))
        assert err.mean() < 1e-3


class TestPearsonR:
    def test_identity(self):
        u = np.arange(8.0)
        assert pearson_r(u, u) == 1.0

    def test_negated(self):
        u = np.arange(8.0)
        assert pearson_r(u, -u + 3.0) == -1.0

    def test_textbook_oracle(self):
        u = np.array([1.0, 2.0, 4.0, 4.5, 0.5, 3.0, 2.5, 1.5])
        e = np.array([0.2, 0.1, 0.9, 1.1, 0.05, 0.45, 0.55, 0.35])
        du = u - u.mean()
        de = e - e.mean()
        want = (du * de).sum() / math.sqrt((du * du).sum() * (de * de).sum())
        assert abs(pearson_r(u, e) - want) < 1e-12

    def test_affine_invariance(self):
        rng = np.random.default_rng(5)
        u = rng.random(100)
        e = rng.random(100)
        base = pearson_r(u, e)
        assert abs(pearson_r(3.5 * u + 2.0, e) - base) < 1e-12
        assert abs(pearson_r(-2.0 * u + 1.0, e) + base) < 1e-12

    def test_degenerate_raises(self):
        with pytest.raises(DegenerateCorrelationError):
            pearson_r(np.full(10, 0.1), np.arange(10.0))
        with pytest.raises(DegenerateCorrelationError):
            pearson_r(np.arange(10.0), np.zeros(10))

    def test_mask_selects_voxels(self):
        u = np.array([0.0, 1.0, 2.0, 100.0])
        e = np.array([0.0, 1.0, 2.0, -50.0])
        mask = np.array([True, True, True, False])
        assert pearson_r(u, e, mask) == 1.0

    def test_requires_two_voxels(self):
        with pytest.raises(VolumeError):
            pearson_r(np.array([1.0]), np.array([2.0]))


class TestEvaluateAll:
    def _setup(self, seed=0, noise=0.05):
        from warpuq import PhantomSpec, RandomFieldSpec, Structure, make_ground_truth_pair

        grid = GridSpec((16, 16, 16))
        phantom = PhantomSpec(
            grid,
            (
                Structure.sphere((7.5, 7.5, 7.5), 3.0, 1.0, 0),
                Structure("shell", (7.5, 7.5, 7.5), (6.0,) * 3, 0.6, 1, (4.0,) * 3),
            ),
            noise_sigma=noise,
            seed=seed,
        )
        field = RandomFieldSpec(grid, amplitude=1.5, smoothness=4.0, seed=seed + 1)
        return make_ground_truth_pair(phantom, field)

    def test_identity_run_reports_degenerate_not_zero(self):
        fixed, moving, labels_fixed, labels_moving, _ = self._setup(noise=0.0)
        samples = SampleSet((field_of(GridSpec((16, 16, 16))),))
        report = evaluate_all(moving, moving, labels_moving, labels_moving, samples)
        assert report.dice_per_structure == (1.0, 1.0)
        assert report.pct_nonpositive_jacobian == 0.0
        assert report.pct_ndv == 0.0
        # Perfect propagation: the error map is constant zero, so every
        # correlation must be reported degenerate rather than 0.
        for rep in report.correlations:
            assert all(r is None for r in rep.r_per_structure)
            assert rep.mean_r is None

    def test_full_report_with_aleatoric(self):
        fixed, moving, labels_fixed, labels_moving, true_field = self._setup()
        rng = np.random.default_rng(2)
        jitter = [
            DisplacementField(
                true_field.grid,
                true_field.data + rng.normal(0, 0.4, true_field.data.shape),
            )
            for _ in range(3)
        ]
        samples = SampleSet(tuple(jitter))
        ale = UncertaintyMap(
            true_field.grid,
            UncertaintyKind.ALEATORIC_SEG,
            rng.uniform(0.01, 0.2, (2,) + true_field.grid.shape),
        )
        report = evaluate_all(fixed, moving, labels_moving, labels_fixed, samples, ale)
        kinds = [rep.kind for rep in report.correlations]
        assert kinds == [
            UncertaintyKind.TRANSFORMATION,
            UncertaintyKind.APPEARANCE,
            UncertaintyKind.EPISTEMIC_SEG,
            UncertaintyKind.ALEATORIC_SEG,
            UncertaintyKind.COMBINED_SEG,
        ]
        for rep in report.correlations:
            assert len(rep.r_per_structure) == 2
            assert rep.voxel_counts == (16**3, 16**3)

    def test_foreground_mask_policy(self):
        fixed, moving, labels_fixed, labels_moving, true_field = self._setup()
        samples = SampleSet((true_field,))
        report = evaluate_all(
            fixed, moving, labels_moving, labels_fixed, samples, mask_policy="foreground"
        )
        for rep in report.correlations:
            assert all(c < 16**3 for c in rep.voxel_counts)

    def test_csv_round_trip(self, tmp_path):
        fixed, moving, labels_fixed, labels_moving, true_field = self._setup()
        rng = np.random.default_rng(4)
        samples = SampleSet(
            tuple(
                DisplacementField(
                    true_field.grid,
                    true_field.data + rng.normal(0, 0.3, true_field.data.shape),
                )
                for _ in range(2)
            )
        )
        ale = UncertaintyMap(
            true_field.grid,
            UncertaintyKind.ALEATORIC_SEG,
            rng.uniform(0.01, 0.2, (2,) + true_field.grid.shape),
        )
        report = evaluate_all(fixed, moving, labels_moving, labels_fixed, samples, ale)
        path = os.path.join(tmp_path, "report.csv")
        write_report_csv(path, report)
        assert read_report_csv(path) == report
