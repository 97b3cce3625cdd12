"""
Soft thresholding and the FISTA gradient-field denoiser, checked against the
closed-form minimiser of the separable l1-regularised problem.

Run with: pytest tests/test_denoise.py -v
"""
import numpy as np
import pytest

from src.denoise import DenoiseConfig, fista_component, fista_denoise, objective, soft_threshold
from src.grid_core import GradientField, GridGeometry, MaskedGrid
from src.utils import ConfigError


def field(dx, dy, mask=None):
    geometry = GridGeometry(dx.shape[0], dx.shape[1])
    return GradientField(MaskedGrid(geometry, dx, mask), MaskedGrid(geometry, dy, mask))


class TestSoftThreshold:
    def test_shrinks_by_tau(self):
        assert soft_threshold(5.0, 2.0) == 3.0
        assert soft_threshold(-5.0, 2.0) == -3.0

    def test_dead_zone(self):
        assert soft_threshold(-1.0, 2.0) == 0.0

    def test_zero_threshold_is_identity(self):
        s = np.random.default_rng(0).normal(size=100)
        np.testing.assert_array_equal(soft_threshold(s, 0.0), s)

    def test_negative_threshold_is_rejected(self):
        with pytest.raises(ValueError):
            soft_threshold(1.0, -0.1)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"lam": 0.0}, {"lam": -1.0}, {"lam": 1.0, "step": 0.0},
                                        {"lam": 1.0, "max_iters": 0}])
    def test_invalid_settings(self, kwargs):
        with pytest.raises(ConfigError):
            DenoiseConfig(**kwargs)


class TestFista:
    def test_zero_field_stays_zero(self):
        for lam in (0.1, 1.0, 10.0):
            out = fista_denoise(field(np.zeros((6, 6)), np.zeros((6, 6))), DenoiseConfig(lam=lam))
            assert np.all(out.dx.values == 0.0) and np.all(out.dy.values == 0.0)

    def test_unit_step_is_one_soft_threshold(self):
        y = np.random.default_rng(1).normal(scale=2.0, size=(32, 32)).ravel()
        result = fista_component(y, DenoiseConfig(lam=0.7, step=1.0))
        np.testing.assert_array_equal(result.values, soft_threshold(y, 0.7))
        # the second iterate repeats the first, which stops the run
        assert result.iterations == 2

    @pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
    def test_small_step_reaches_the_closed_form_optimum(self, lam):
        for seed in range(10):
            y = np.random.default_rng(seed).normal(scale=3.0, size=(32, 32)).ravel()
            cfg = DenoiseConfig(lam=lam, step=0.1, max_iters=3000, rel_tol=1e-15)
            result = fista_component(y, cfg)
            x_star = soft_threshold(y, lam)
            f_star = objective(x_star, y, lam)
            assert result.history[-1] - f_star <= 1e-6

            # accelerated rate envelope: F(x_k) - F* <= 2 ||x_0 - x*||^2 / (gamma (k + 1)^2)
            r0 = float(np.sum((y - x_star) ** 2))
            for k, f_k in enumerate(result.history, start=1):
                assert f_k - f_star <= 2.0 * r0 / (cfg.step * (k + 1) ** 2) + 1e-9

    def test_fixed_point_is_returned_unchanged(self):
        y = np.random.default_rng(2).normal(size=200)
        x_star = soft_threshold(y, 0.5)
        result = fista_component(y, DenoiseConfig(lam=0.5, step=0.3), initial=x_star)
        np.testing.assert_allclose(result.values, x_star, atol=1e-12)

    def test_shrinkage_and_sparsity(self):
        rng = np.random.default_rng(3)
        dx, dy = rng.normal(size=(16, 16)), rng.normal(size=(16, 16))
        noisy = field(dx, dy)
        previous_zeros = -1
        for lam in (0.1, 0.5, 1.0, 2.0):
            out = fista_denoise(noisy, DenoiseConfig(lam=lam))
            assert np.all(np.abs(out.dx.values) <= np.abs(dx) + 1e-12)
            zeros = int(np.sum(out.dx.values == 0.0) + np.sum(out.dy.values == 0.0))
            assert zeros >= previous_zeros
            previous_zeros = zeros
            before = objective(dx.ravel(), dx.ravel(), lam)
            assert objective(out.dx.values.ravel(), dx.ravel(), lam) <= before

    def test_unavailable_cells_pass_through(self):
        rng = np.random.default_rng(4)
        mask = rng.random((10, 10)) > 0.4
        dx = np.where(mask, rng.normal(scale=3.0, size=(10, 10)), 0.0)
        out = fista_denoise(field(dx, dx.copy(), mask), DenoiseConfig(lam=1.0))
        np.testing.assert_array_equal(out.dx.mask, mask)
        assert np.all(out.dx.values[~mask] == 0.0)
        np.testing.assert_array_equal(out.dx.values[mask], soft_threshold(dx[mask], 1.0))
