"""Heun 采样器测试"""
import pytest
import numpy as np


class ConstantDenoiser:
    """D(z, t) = c，同时计数调用次数"""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)
        self.calls = 0

    def __call__(self, z, t):
        self.calls += 1
        return np.broadcast_to(self.c, np.shape(z)).copy()


def _scalar_gaussian(lam):
    """N(0, lam) 数据的 Wiener 去噪器"""
    return lambda z, t: lam / (lam + t * t) * z


class TestPrior:
    """先验噪声测试"""

    def test_deterministic(self, edm18):
        """测试相同种子得到逐位相同的噪声"""
        from fpmc.sampler import SamplerConfig, sample_prior
        cfg = SamplerConfig(edm18, ConstantDenoiser(0.0), seed=5, batch=4, d=3)
        np.testing.assert_array_equal(sample_prior(cfg), sample_prior(cfg))

    def test_moments(self, edm18):
        """测试先验标准差约为 T=80、均值约为 0"""
        from fpmc.sampler import SamplerConfig, sample_prior
        cfg = SamplerConfig(edm18, ConstantDenoiser(0.0), seed=0, batch=100000, d=1)
        z = sample_prior(cfg)
        assert abs(z.std() - 80.0) < 0.8
        assert abs(z.mean()) < 4 * 80.0 / np.sqrt(z.size)

    def test_dimension_from_denoiser(self, small_dataset, edm18):
        """测试从去噪器的几何推断维度"""
        from fpmc.classical import OptimalDenoiser
        from fpmc.sampler import SamplerConfig
        cfg = SamplerConfig(edm18, OptimalDenoiser(small_dataset, edm18))
        assert cfg.d == small_dataset.d

    def test_invalid_config(self, edm18):
        """测试方差保持调度与无法推断维度"""
        from fpmc.core import DiffusionSchedule
        from fpmc.errors import ValidationError
        from fpmc.sampler import SamplerConfig
        with pytest.raises(ValidationError):
            SamplerConfig(DiffusionSchedule.edm(18, kind="vp"), ConstantDenoiser(0.0), d=1)
        with pytest.raises(ValidationError):
            SamplerConfig(edm18, lambda z, t: z)


class TestDrift:
    """ODE 漂移项测试"""

    def test_values(self):
        """测试 (z - D) / t"""
        from fpmc.sampler import ode_drift
        assert ode_drift(np.array([2.0]), 1.0, np.array([0.0]))[0] == 2.0
        np.testing.assert_array_equal(ode_drift(np.ones(3), 0.5, np.ones(3)), np.zeros(3))

    def test_nonpositive_time(self):
        """测试 t <= 0"""
        from fpmc.errors import ValidationError
        from fpmc.sampler import ode_drift
        with pytest.raises(ValidationError):
            ode_drift(np.ones(1), 0.0, np.zeros(1))


class TestHeunSample:
    """Heun 求解器测试"""

    def test_constant_denoiser_oracle(self, edm18):
        """测试常数去噪器：解析解 z(t) = c + (z0 - c) t / t0"""
        from fpmc.sampler import SamplerConfig, heun_sample, sample_prior
        c = np.array([0.3, -0.7])
        cfg = SamplerConfig(edm18, ConstantDenoiser(c), seed=1, batch=3, d=2,
                            record_trajectory=True)
        z0 = sample_prior(cfg)
        result = heun_sample(cfg)
        for t, z in result.trajectory:
            np.testing.assert_allclose(z, c + (z0 - c) * t / 80.0, rtol=0, atol=1e-10)
        np.testing.assert_allclose(result.x, np.tile(c, (3, 1)), atol=1e-10)

    def test_evaluation_count(self, edm18):
        """测试 18 步网格 35 次、2 步网格 3 次去噪器调用"""
        from fpmc.core import DiffusionSchedule
        from fpmc.sampler import SamplerConfig, heun_sample
        denoiser = ConstantDenoiser(0.0)
        assert heun_sample(SamplerConfig(edm18, denoiser, d=1)).n_evals == 35
        assert denoiser.calls == 35
        two = DiffusionSchedule.from_times([80.0, 1.0])
        assert heun_sample(SamplerConfig(two, ConstantDenoiser(0.0), d=1)).n_evals == 3
        assert heun_sample(SamplerConfig(DiffusionSchedule.edm(40), ConstantDenoiser(0.0),
                                         d=1)).n_evals == 79

    def test_shared_noise_across_denoisers(self, small_dataset, edm18):
        """测试同一种子下不同去噪器共享初始噪声，结果可复现"""
        from fpmc.classical import OptimalDenoiser
        from fpmc.sampler import SamplerConfig, heun_sample
        a = heun_sample(SamplerConfig(edm18, OptimalDenoiser(small_dataset, edm18), seed=4,
                                      batch=2))
        b = heun_sample(SamplerConfig(edm18, ConstantDenoiser(np.zeros(small_dataset.d)),
                                      seed=4, batch=2, d=small_dataset.d))
        again = heun_sample(SamplerConfig(edm18, OptimalDenoiser(small_dataset, edm18), seed=4,
                                          batch=2))
        assert a.noise_digest == b.noise_digest
        np.testing.assert_array_equal(a.x, again.x)

    def test_second_order_convergence(self):
        """测试步数加倍时 t_min 处误差约缩小 4 倍"""
        from fpmc.core import DiffusionSchedule
        from fpmc.sampler import SamplerConfig, heun_sample
        lam = 0.5
        z0 = np.array([[80.0]])
        errors = []
        for steps in [41, 81]:
            sched = DiffusionSchedule.edm(steps)
            result = heun_sample(SamplerConfig(sched, _scalar_gaussian(lam), d=1,
                                               record_trajectory=True), z=z0)
            t_min, z = result.trajectory[-2]
            exact = z0 * np.sqrt((lam + t_min ** 2) / (lam + 80.0 ** 2))
            errors.append(float(np.abs(z - exact).max()))
        assert 3.0 <= errors[0] / errors[1] <= 5.0

    def test_gaussian_moments(self):
        """测试高斯数据上 Wiener 去噪器采样的均值与协方差"""
        from fpmc.classical import WienerDenoiser, WienerModel
        from fpmc.core import DiffusionSchedule
        from fpmc.sampler import SamplerConfig, heun_sample
        mean = np.array([0.2, -0.1])
        cov = np.array([[0.3, 0.1], [0.1, 0.2]])
        sched = DiffusionSchedule.edm(18)
        denoiser = WienerDenoiser(WienerModel.from_covariance(mean, cov), sched)
        x = heun_sample(SamplerConfig(sched, denoiser, seed=3, batch=10000, d=2)).x
        np.testing.assert_allclose(x.mean(axis=0), mean, atol=0.02)
        np.testing.assert_allclose(np.cov(x.T), cov, atol=0.02)

    def test_non_finite_state(self, edm18):
        """测试非有限状态报错并带步序号"""
        from fpmc.errors import NumericalError
        from fpmc.sampler import SamplerConfig, heun_sample
        cfg = SamplerConfig(edm18, lambda z, t: np.full_like(z, np.nan), d=2)
        with pytest.raises(NumericalError) as info:
            heun_sample(cfg)
        assert info.value.step == 0
