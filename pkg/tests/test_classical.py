"""经典去噪器测试：最优去噪器与 Wiener 滤波"""
import pytest
import numpy as np


@pytest.fixture
def gaussian_model(geom4):
    """给定均值与协方差的 Wiener 模型"""
    from fpmc.classical import WienerModel
    rng = np.random.default_rng(31)
    A = rng.standard_normal((geom4.d, geom4.d))
    cov = 0.05 * (A @ A.T) / geom4.d + 0.01 * np.eye(geom4.d)
    mean = rng.uniform(-0.3, 0.3, geom4.d)
    return WienerModel.from_covariance(mean, cov, geom4), mean, cov


class TestOptimalDenoiser:
    """最优去噪器测试"""

    def test_small_t_returns_nearest(self, small_dataset, edm18):
        """测试 t 很小时输出最近的训练图像"""
        from fpmc.classical import optimal_denoiser
        z = small_dataset.images[4] + 1e-4
        np.testing.assert_allclose(optimal_denoiser(z, 1e-3, small_dataset, edm18),
                                   small_dataset.images[4], atol=1e-9)

    def test_large_t_returns_mean(self, small_dataset, edm18):
        """测试 t 很大时输出数据均值"""
        from fpmc.classical import optimal_denoiser
        out = optimal_denoiser(np.zeros(small_dataset.d), 1e5, small_dataset, edm18)
        np.testing.assert_allclose(out, small_dataset.images.mean(axis=0), atol=1e-6)

    def test_matches_softmax(self, small_dataset, edm18):
        """测试与直接 softmax 加权平均一致"""
        from fpmc.classical import OptimalDenoiser
        denoiser = OptimalDenoiser(small_dataset, edm18)
        z = np.random.default_rng(2).standard_normal((3, small_dataset.d))
        out = denoiser(z, 0.8)
        for b in range(3):
            logits = -np.sum((small_dataset.images - z[b]) ** 2, axis=1) / (2 * 0.64)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            np.testing.assert_allclose(out[b], w @ small_dataset.images, rtol=1e-10)
        assert denoiser.geometry == small_dataset.geometry

    def test_vp_schedule(self, small_dataset):
        """测试方差保持调度下似然使用 alpha x"""
        from fpmc.classical import optimal_denoiser
        from fpmc.core import DiffusionSchedule
        sched = DiffusionSchedule.edm(18, kind="vp")
        a, s = sched.alpha(1.5), sched.sigma(1.5)
        z = np.random.default_rng(3).standard_normal(small_dataset.d)
        logits = -np.sum((a * small_dataset.images - z) ** 2, axis=1) / (2 * s * s)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        np.testing.assert_allclose(optimal_denoiser(z, 1.5, small_dataset, sched),
                                   w @ small_dataset.images, rtol=1e-10)


class TestWiener:
    """Wiener 滤波测试"""

    @pytest.mark.parametrize("kind", ["edm", "vp"])
    def test_matrix_matches_direct_solve(self, gaussian_model, kind):
        """测试 W_t = alpha Sigma (alpha^2 Sigma + sigma^2 I)^-1"""
        from fpmc.classical import wiener_matrix
        from fpmc.core import DiffusionSchedule
        model, _, cov = gaussian_model
        sched = DiffusionSchedule.edm(18, kind=kind)
        for t in [0.01, 0.5, 3.0, 40.0]:
            a, s = sched.alpha(t), sched.sigma(t)
            direct = a * cov @ np.linalg.inv(a * a * cov + s * s * np.eye(cov.shape[0]))
            np.testing.assert_allclose(wiener_matrix(model, t, sched), direct,
                                       rtol=1e-8, atol=1e-10)

    def test_matrix_commutes_with_covariance(self, gaussian_model, edm18):
        """测试 W_t 与 Sigma 可交换"""
        from fpmc.classical import wiener_matrix
        model, _, cov = gaussian_model
        for t in [0.05, 1.0, 20.0]:
            W = wiener_matrix(model, t, edm18)
            np.testing.assert_allclose(W @ cov, cov @ W, atol=1e-10)

    def test_shrink_monotone_in_t(self, gaussian_model, edm18):
        """测试收缩系数在 [0, 1] 内且随 t 单调不增"""
        model, _, _ = gaussian_model
        factors = np.stack([model.shrink(t, edm18) for t in np.geomspace(0.002, 80.0, 25)])
        assert np.all(factors >= 0) and np.all(factors <= 1)
        assert np.all(np.diff(factors, axis=0) <= 1e-15)

    def test_denoise_is_affine(self, gaussian_model, edm18):
        """测试 wiener_denoise 对 z 为仿射映射"""
        from fpmc.classical import wiener_denoise
        model, _, _ = gaussian_model
        rng = np.random.default_rng(7)
        z1, z2 = rng.standard_normal(model.d), rng.standard_normal(model.d)
        for w in [0.3, 2.5]:
            np.testing.assert_allclose(
                wiener_denoise(w * z1 + (1 - w) * z2, 0.9, model, edm18),
                w * wiener_denoise(z1, 0.9, model, edm18)
                + (1 - w) * wiener_denoise(z2, 0.9, model, edm18),
                rtol=1e-10, atol=1e-12)

    def test_fit_rank_one(self, geom4):
        """测试数据 {-v, +v} 的均值为 0，且只有一个非零特征值 |v|^2"""
        from fpmc.classical import fit_wiener
        from fpmc.core import Dataset
        v = np.random.default_rng(8).uniform(-1, 1, geom4.d)
        model = fit_wiener(Dataset(geom4, np.stack([-v, v])))
        np.testing.assert_allclose(model.mean, 0.0, atol=1e-15)
        lam = np.sort(model.eigvals)
        assert lam[-1] == pytest.approx(v @ v, rel=1e-10)
        np.testing.assert_allclose(lam[:-1], 0.0, atol=1e-12)

    def test_gaussian_posterior_mean(self, gaussian_model, edm18):
        """测试与高斯后验均值解析解一致"""
        from fpmc.classical import wiener_denoise
        model, mean, cov = gaussian_model
        z = np.random.default_rng(4).standard_normal((4, model.d))
        t = 0.7
        expected = mean + (cov @ np.linalg.solve(cov + t * t * np.eye(model.d),
                                                 (z - mean).T)).T
        np.testing.assert_allclose(wiener_denoise(z, t, model, edm18), expected,
                                   rtol=1e-8, atol=1e-10)

    def test_fit_recovers_moments(self, toy_manifold):
        """测试拟合得到经验均值与协方差 (除以 N)"""
        from fpmc.classical import fit_wiener
        model = fit_wiener(toy_manifold)
        np.testing.assert_allclose(model.mean, toy_manifold.images.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(model.covariance(),
                                   np.cov(toy_manifold.images.T, bias=True), atol=1e-10)
        assert np.all(model.eigvals >= 0)

    def test_fit_needs_two_images(self, small_dataset):
        """测试单张图像无法拟合"""
        from fpmc.classical import fit_wiener
        from fpmc.errors import ValidationError
        with pytest.raises(ValidationError):
            fit_wiener(small_dataset.subset([0]))

    def test_denoiser_wrapper(self, gaussian_model, edm18):
        """测试 (z, t) 调用约定"""
        from fpmc.classical import WienerDenoiser, wiener_denoise
        model, _, _ = gaussian_model
        z = np.random.default_rng(5).standard_normal(model.d)
        denoiser = WienerDenoiser(model, edm18)
        np.testing.assert_array_equal(denoiser(z, 2.0), wiener_denoise(z, 2.0, model, edm18))
        assert denoiser.geometry == model.geometry

    def test_save_load(self, gaussian_model, edm18, temp_dir):
        """测试模型目录读写，调度写入 manifest"""
        from fpmc.classical import load_wiener, save_wiener, wiener_denoise
        from fpmc.storage import read_json
        model, _, _ = gaussian_model
        save_wiener(model, temp_dir, edm18)
        loaded = load_wiener(temp_dir)
        assert loaded.geometry == model.geometry
        z = np.random.default_rng(6).standard_normal(model.d)
        np.testing.assert_allclose(wiener_denoise(z, 1.0, loaded, edm18),
                                   wiener_denoise(z, 1.0, model, edm18), rtol=1e-12)
        manifest = read_json(f"{temp_dir}/manifest.json")
        assert manifest["format"] == "fpmc-wiener"
        assert len(manifest["schedule"]["t_grid"]) == 18

    def test_load_wrong_format(self, temp_dir):
        """测试非 Wiener 目录"""
        from fpmc.classical import load_wiener
        from fpmc.errors import ValidationError
        from fpmc.storage import write_json
        write_json(f"{temp_dir}/manifest.json", {"format": "fpmc-model"})
        with pytest.raises(ValidationError):
            load_wiener(temp_dir)
