"""定量比较测试"""
import csv
import json
import math
import pytest
import numpy as np


class TestSampleSimilarity:
    """样本相似度测试"""

    def test_identical(self):
        """测试 a = b 时 MSE 0、r² 1"""
        from fpmc.evaluation import sample_similarity
        b = np.random.default_rng(0).uniform(-1, 1, (5, 8))
        stats = sample_similarity(b, b)
        assert stats.mse_mean == 0.0
        assert stats.r2_mean == 1.0
        assert stats.n == 5

    def test_hand_example(self):
        """测试 d=2：a=(0,0), b=(1,-1) -> mse 1, r² 0"""
        from fpmc.evaluation import sample_similarity
        stats = sample_similarity(np.array([0.0, 0.0]), np.array([1.0, -1.0]))
        assert stats.mse_mean == 1.0
        assert stats.r2_mean == 0.0
        assert math.isnan(stats.mse_se)

    def test_per_sample_mean_gives_zero_r2(self):
        """测试 a 为每个参考样本自身均值时 r² 为 0"""
        from fpmc.evaluation import sample_similarity
        b = np.random.default_rng(1).uniform(-1, 1, (4, 6))
        a = np.repeat(b.mean(axis=1, keepdims=True), 6, axis=1)
        assert sample_similarity(a, b).r2_mean == pytest.approx(0.0, abs=1e-12)

    def test_symmetry(self):
        """测试 MSE 对称而 r² 不对称"""
        from fpmc.evaluation import sample_similarity
        rng = np.random.default_rng(2)
        a, b = rng.uniform(-1, 1, (6, 5)), 0.3 * rng.uniform(-1, 1, (6, 5))
        ab, ba = sample_similarity(a, b), sample_similarity(b, a)
        assert ab.mse_mean == pytest.approx(ba.mse_mean)
        assert ab.r2_mean != pytest.approx(ba.r2_mean)

    def test_zero_variance_reference_excluded(self):
        """测试方差为 0 的参考样本从 r² 中剔除并计数"""
        from fpmc.evaluation import sample_similarity
        b = np.array([[0.5, 0.5], [1.0, -1.0], [0.2, 0.4]])
        a = np.array([[0.0, 0.0], [0.0, 0.0], [0.2, 0.4]])
        stats = sample_similarity(a, b)
        assert stats.excluded == 1
        assert stats.r2_mean == pytest.approx(0.5)
        assert stats.n == 3

    def test_count_mismatch(self):
        """测试样本数量不一致"""
        from fpmc.errors import ValidationError
        from fpmc.evaluation import sample_similarity
        with pytest.raises(ValidationError):
            sample_similarity(np.zeros((2, 3)), np.zeros((3, 3)))

    def test_standard_error_scaling(self):
        """测试标准误按 1/sqrt(n) 缩小"""
        from fpmc.evaluation import standard_error
        rng = np.random.default_rng(3)
        ses = [standard_error(rng.standard_normal(n)) for n in (100, 1000, 10000)]
        slope = np.polyfit(np.log([100, 1000, 10000]), np.log(ses), 1)[0]
        assert slope == pytest.approx(-0.5, abs=0.1)


class TestComparisonReport:
    """比较报告测试"""

    def test_save(self, temp_dir):
        """测试 JSON 与文本报告，带 r² 约定版本"""
        from fpmc.evaluation import R2_CONVENTION, compare_samples
        rng = np.random.default_rng(4)
        reference = rng.uniform(-1, 1, (4, 6))
        report = compare_samples({"pspc": reference + 0.1, "optimal": reference * 0.5},
                                 reference, "ncsn")
        report.save(temp_dir)
        with open(f"{temp_dir}/comparison.json", encoding="utf-8") as f:
            data = json.load(f)
        assert data["r2_convention"] == R2_CONVENTION
        assert data["reference"] == "ncsn"
        assert data["rows"]["pspc"]["mse_mean"] == pytest.approx(0.01)
        with open(f"{temp_dir}/comparison.txt", encoding="utf-8") as f:
            text = f.read()
        assert "pspc" in text and "optimal" in text


class TestSweep:
    """去噪误差扫描测试"""

    def test_same_denoiser_zero(self, small_dataset, edm18):
        """测试去噪器与目标相同时误差为 0"""
        from fpmc.classical import OptimalDenoiser
        from fpmc.evaluation import denoiser_error_sweep
        denoiser = OptimalDenoiser(small_dataset, edm18)
        sweep = denoiser_error_sweep(denoiser, denoiser, small_dataset, [5.0, 0.5], 8, 0, edm18)
        np.testing.assert_array_equal(sweep.mse, [0.0, 0.0])

    def test_deterministic_and_batch_invariant(self, small_dataset, edm18):
        """测试固定种子可复现，且与批大小无关"""
        from fpmc.classical import OptimalDenoiser, WienerDenoiser, fit_wiener
        from fpmc.evaluation import denoiser_error_sweep
        target = OptimalDenoiser(small_dataset, edm18)
        wiener = WienerDenoiser(fit_wiener(small_dataset), edm18)
        times = [10.0, 1.0, 0.1]
        a = denoiser_error_sweep(wiener, target, small_dataset, times, 12, 3, edm18)
        b = denoiser_error_sweep(wiener, target, small_dataset, times, 12, 3, edm18)
        c = denoiser_error_sweep(wiener, target, small_dataset, times, 12, 3, edm18,
                                 batch_size=5)
        np.testing.assert_array_equal(a.mse, b.mse)
        np.testing.assert_allclose(a.mse, c.mse, rtol=1e-9)
        np.testing.assert_allclose(a.stderr, c.stderr, rtol=1e-9)
        assert np.all(a.mse > 0)

    def test_invalid_time(self, small_dataset, edm18):
        """测试 t <= 0"""
        from fpmc.classical import OptimalDenoiser
        from fpmc.errors import ValidationError
        from fpmc.evaluation import denoiser_error_sweep
        denoiser = OptimalDenoiser(small_dataset, edm18)
        with pytest.raises(ValidationError):
            denoiser_error_sweep(denoiser, denoiser, small_dataset, [1.0, 0.0], 4, 0, edm18)

    def test_csv_and_dict(self, temp_dir):
        """测试 CSV 列与字典往返"""
        from fpmc.evaluation import SweepResult
        sweep = SweepResult(np.array([2.0, 0.5]), np.array([0.1, 0.2]), np.array([0.01, 0.02]),
                            100)
        path = sweep.write_csv(f"{temp_dir}/sweep.csv")
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["t", "mse", "stderr", "n"]
        assert float(rows[2][1]) == 0.2
        restored = SweepResult.from_dict(sweep.to_dict())
        np.testing.assert_array_equal(restored.stderr, sweep.stderr)
        assert restored.n_per_t == 100


class TestRelativeChange:
    """相对误差变化测试"""

    def _sweep(self, mse):
        from fpmc.evaluation import SweepResult
        return SweepResult(np.array([3.0, 1.0, 0.1]), np.asarray(mse, dtype=float),
                           np.zeros(3), 10)

    def test_percentages(self):
        """测试 0%、-10%、+100%"""
        from fpmc.evaluation import relative_error_change
        base = self._sweep([0.2, 0.4, 0.1])
        np.testing.assert_allclose(relative_error_change(base, base), 0.0)
        np.testing.assert_allclose(relative_error_change(base, self._sweep([0.18, 0.36, 0.09])),
                                   -10.0)
        np.testing.assert_allclose(relative_error_change(base, self._sweep([0.4, 0.8, 0.2])),
                                   100.0)

    def test_zero_baseline(self):
        """测试基线为 0 时报错"""
        from fpmc.errors import ValidationError
        from fpmc.evaluation import relative_error_change
        with pytest.raises(ValidationError):
            relative_error_change(self._sweep([0.2, 0.0, 0.1]), self._sweep([0.1, 0.1, 0.1]))

    def test_grid_mismatch(self):
        """测试 t 网格不一致"""
        from fpmc.errors import ValidationError
        from fpmc.evaluation import SweepResult, relative_error_change
        other = SweepResult(np.array([3.0, 1.0]), np.ones(2), np.zeros(2), 10)
        with pytest.raises(ValidationError):
            relative_error_change(self._sweep([0.2, 0.4, 0.1]), other)

    def test_table(self):
        """测试多变体对比表"""
        from fpmc.evaluation import sweep_table
        base = self._sweep([0.2, 0.4, 0.1])
        rows = sweep_table(base, {"hflip": self._sweep([0.1, 0.4, 0.2])})
        assert [r["hflip"] for r in rows] == pytest.approx([-50.0, 0.0, 100.0])
        assert rows[0]["baseline_mse"] == 0.2
