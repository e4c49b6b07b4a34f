import numpy as np
import pytest

from warpuq import (
    DisplacementField,
    GridSpec,
    LabelVolume,
    PhantomSpec,
    RegistrationConfig,
    Similarity,
    StochasticMode,
    StochasticPolicy,
    Structure,
    VolumeError,
    diffusion_energy,
    generate_phantom,
    register,
    sample_registrations,
    similarity_ncc,
    soft_dice_loss,
    transformation_uncertainty,
    warp_scalar,
)
from warpuq.volumes import ScalarVolume

from conftest import random_volume


def ncc_window_oracle(a, b, window):
    """Naive per-window loss computation with truncated edge windows."""
    h = window // 2
    nz, ny, nx = a.shape
    total = 0.0
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                wa = a[
                    max(z - h, 0) : z + h + 1,
                    max(y - h, 0) : y + h + 1,
                    max(x - h, 0) : x + h + 1,
                ].ravel()
                wb = b[
                    max(z - h, 0) : z + h + 1,
                    max(y - h, 0) : y + h + 1,
                    max(x - h, 0) : x + h + 1,
                ].ravel()
                da = wa - wa.mean()
                db = wb - wb.mean()
                va = (da * da).sum()
                vb = (db * db).sum()
                if va <= 1e-10 * (wa * wa).sum() + 1e-30 or vb <= 1e-10 * (wb * wb).sum() + 1e-30:
                    continue
                cross = (da * db).sum()
                total += cross * cross / (va * vb)
    return 1.0 - total / (nz * ny * nx)


def default_phantom(noise=0.05, seed=7, n=24):
    grid = GridSpec((n, n, n))
    mid = (n - 1) / 2.0
    spec = PhantomSpec(
        grid,
        (
            Structure.sphere((mid,) * 3, 0.16 * n, 1.0, 0),
            Structure("shell", (mid,) * 3, (0.16 * n + 4.0,) * 3, 0.6, 1, (0.16 * n + 1.5,) * 3),
        ),
        noise_sigma=noise,
        seed=seed,
    )
    return generate_phantom(spec)


class TestRegistrationConfig:
    def test_defaults(self):
        cfg = RegistrationConfig()
        assert cfg.levels == 3
        assert cfg.iterations == 100
        assert cfg.step_size == 0.5
        assert cfg.ncc_window == 9
        assert (cfg.weight_sim, cfg.weight_diffusion, cfg.weight_dice) == (1.0, 1.0, 1.0)
        assert cfg.smooth_sigma == 1.0

    def test_rejects_even_window(self):
        with pytest.raises(VolumeError):
            RegistrationConfig(ncc_window=8)

    def test_rejects_all_zero_weights(self):
        with pytest.raises(VolumeError):
            RegistrationConfig(weight_sim=0, weight_diffusion=0, weight_dice=0)

    def test_rejects_negative_weight(self):
        with pytest.raises(VolumeError):
            RegistrationConfig(weight_sim=-1)


class TestSimilarityNcc:
    def test_self_similarity_zero(self, grid8):
        a = random_volume(grid8, 1)
        assert similarity_ncc(a, a, 5) < 1e-12

    def test_affine_intensity_invariance(self, grid8):
        a = random_volume(grid8, 2)
        b = ScalarVolume(grid8, 2.0 * a.data + 3.0)
        assert similarity_ncc(a, b, 5) < 1e-12

    def test_matches_window_oracle(self):
        rng = np.random.default_rng(3)
        grid = GridSpec((16, 16, 16))
        a = ScalarVolume(grid, rng.random(grid.shape))
        b = ScalarVolume(grid, rng.random(grid.shape))
        got = similarity_ncc(a, b, 9)
        want = ncc_window_oracle(a.data, b.data, 9)
        assert abs(got - want) < 1e-6

    def test_value_in_unit_interval(self, grid8):
        a = random_volume(grid8, 4)
        b = random_volume(grid8, 5)
        loss = similarity_ncc(a, b, 3)
        assert 0.0 <= loss <= 1.0


class TestDiffusionEnergy:
    def test_zero_field(self, grid8):
        f = DisplacementField(grid8, np.zeros((3,) + grid8.shape))
        assert diffusion_energy(f) == 0.0

    def test_translation_unpenalized(self, grid8):
        f = DisplacementField(grid8, np.full((3,) + grid8.shape, 4.2))
        assert diffusion_energy(f) == 0.0

    def test_unit_shear(self, grid8):
        data = np.zeros((3,) + grid8.shape)
        data[0] = np.arange(8.0).reshape(1, 1, 8)
        assert diffusion_energy(DisplacementField(grid8, data)) == 1.0


class TestSoftDiceLoss:
    def _cube(self, grid, x0, x1):
        data = np.zeros((1,) + grid.shape)
        data[0, :, :, x0:x1] = 1.0
        return LabelVolume(grid, data, binary=True)

    def test_identical_near_zero(self, grid8):
        a = self._cube(grid8, 0, 4)
        assert soft_dice_loss(a, a) < 1e-4

    def test_disjoint_near_one(self, grid8):
        assert soft_dice_loss(self._cube(grid8, 0, 3), self._cube(grid8, 5, 8)) > 1.0 - 1e-4

    def test_half_overlap(self):
        grid = GridSpec((8, 4, 4))
        got = soft_dice_loss(self._cube(grid, 0, 4), self._cube(grid, 2, 6))
        assert abs(got - 0.5) < 1e-4

    def test_channel_mismatch(self, grid8):
        a = self._cube(grid8, 0, 4)
        b = LabelVolume(grid8, np.zeros((2,) + grid8.shape), binary=True)
        with pytest.raises(VolumeError):
            soft_dice_loss(a, b)


class TestRegister:
    def test_null_registration(self):
        img, _ = default_phantom()
        field = register(img, img, cfg=RegistrationConfig(iterations=40))
        assert np.abs(field.data).mean() < 0.05

    def test_translation_recovery(self):
        img, labels = default_phantom(noise=0.0)
        grid = img.grid
        shift = np.zeros((3,) + grid.shape)
        shift[0] = 2.0
        true_field = DisplacementField(grid, shift)
        fixed = warp_scalar(img, true_field)
        field = register(fixed, img, cfg=RegistrationConfig(iterations=80))
        fg = labels.data.sum(axis=0) > 0
        err = np.sqrt(
            (field.data[0][fg] - 2.0) ** 2
            + field.data[1][fg] ** 2
            + field.data[2][fg] ** 2
        ).mean()
        assert err < 0.3

    def test_endpoint_improvement(self):
        from warpuq.registration import _loss_only
        from warpuq.warp import _base_coords

        img, labels = default_phantom(noise=0.02)
        grid = img.grid
        shift = np.zeros((3,) + grid.shape)
        shift[0] = 1.5
        fixed = warp_scalar(img, DisplacementField(grid, shift))
        cfg = RegistrationConfig(iterations=40)
        field = register(fixed, img, cfg=cfg)
        base = _base_coords(grid.shape)
        zero = np.zeros((3,) + grid.shape)
        initial = _loss_only(fixed.data, img.data, None, None, zero, cfg, base)
        final = _loss_only(fixed.data, img.data, None, None, field.data, cfg, base)
        assert final <= initial

    def test_deterministic(self):
        img, _ = default_phantom()
        cfg = RegistrationConfig(iterations=15, seed=5)
        a = register(img, img, cfg=cfg)
        b = register(img, img, cfg=cfg)
        assert np.array_equal(a.data, b.data)

    def test_ssd_similarity_works(self):
        img, _ = default_phantom(noise=0.0, n=16)
        grid = img.grid
        shift = np.zeros((3,) + grid.shape)
        shift[0] = 1.0
        fixed = warp_scalar(img, DisplacementField(grid, shift))
        cfg = RegistrationConfig(iterations=60, similarity=Similarity.SSD)
        field = register(fixed, img, cfg=cfg)
        fg = img.data > 0.5
        assert abs(field.data[0][fg].mean() - 1.0) < 0.4

    def test_labels_must_come_in_pairs(self):
        img, labels = default_phantom(n=16)
        with pytest.raises(VolumeError):
            register(img, img, labels_moving=labels, labels_fixed=None)

    def test_grid_mismatch(self):
        a, _ = default_phantom(n=16)
        b, _ = default_phantom(n=24)
        with pytest.raises(VolumeError):
            register(a, b)

    def test_translation_equivariance_smoke(self):
        # Registering a pair whose content is shifted by 3 voxels yields the
        # same field on the common interior to 0.1 voxels.
        n = 24
        grid = GridSpec((n, n, n))

        def phantom_at(cx):
            spec = PhantomSpec(
                grid,
                (Structure.sphere((cx, 11.5, 11.5), 4.0, 1.0, 0),),
                noise_sigma=0.0,
                seed=0,
            )
            return generate_phantom(spec)[0]

        def fixed_for(moving, ux):
            shift = np.zeros((3,) + grid.shape)
            shift[0] = ux
            return warp_scalar(moving, DisplacementField(grid, shift))

        cfg = RegistrationConfig(iterations=60)
        m1 = phantom_at(10.0)
        f1 = register(fixed_for(m1, 1.5), m1, cfg=cfg)
        m2 = phantom_at(13.0)
        f2 = register(fixed_for(m2, 1.5), m2, cfg=cfg)
        # Compare on the interior band around each sphere, aligned by the shift.
        band1 = (slice(6, 18), slice(6, 18), slice(5, 16))
        band2 = (slice(6, 18), slice(6, 18), slice(8, 19))
        for c in range(3):
            diff = np.abs(f1.data[c][band1] - f2.data[c][band2]).mean()
            assert diff < 0.1


class TestSampleRegistrations:
    def test_inert_policy_matches_register(self):
        img, _ = default_phantom(n=16)
        cfg = RegistrationConfig(iterations=10, seed=3)
        policy = StochasticPolicy(
            mode=StochasticMode.BOTH, dropout_rate=0.0, init_sigma=0.0, samples=1
        )
        ss = sample_registrations(img, img, None, None, cfg, policy)
        f = register(img, img, cfg=cfg)
        assert np.array_equal(ss[0].data, f.data)

    def test_bit_identical_reruns(self):
        img, _ = default_phantom(n=16)
        cfg = RegistrationConfig(iterations=10, seed=3)
        policy = StochasticPolicy(samples=4)
        a = sample_registrations(img, img, None, None, cfg, policy)
        b = sample_registrations(img, img, None, None, cfg, policy)
        assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))

    def test_samples_differ_under_stochasticity(self):
        img, _ = default_phantom(n=16)
        cfg = RegistrationConfig(iterations=10, seed=3)
        policy = StochasticPolicy(samples=2, init_sigma=0.5, dropout_rate=0.2)
        ss = sample_registrations(img, img, None, None, cfg, policy)
        assert not np.array_equal(ss[0].data, ss[1].data)

    def test_null_pair_bounds_sampler_spread(self):
        img, _ = default_phantom(n=16)
        cfg = RegistrationConfig(iterations=40, seed=11)
        policy = StochasticPolicy(samples=8, init_sigma=0.5, dropout_rate=0.2)
        ss = sample_registrations(img, img, None, None, cfg, policy)
        tu = transformation_uncertainty(ss)
        assert tu.data.max() < 0.1
