"""Q/R 微调测试"""
import pytest
import numpy as np


def _random_instance(rng, n_sources=1):
    """随机小规模实例：几何、数据、步、参数、批量 z 与目标"""
    from fpmc.core import Dataset, ImageGeometry, SourceMeasure
    from fpmc.estimator import FpmcStep
    w, h = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    geom = ImageGeometry(w, h, 1)
    L = int(rng.integers(1, 4))
    data = Dataset(geom, rng.uniform(-1, 1, (int(rng.integers(2, 6)), geom.d)))
    sources = [SourceMeasure.uniform(data)]
    if n_sources > 1:
        sources.append(SourceMeasure(data, rng.uniform(0.2, 1.0, data.n)))
    index = [k % len(sources) for k in range(L)]
    step = FpmcStep(np.ones((L, geom.d)), np.ones((L, geom.d)), tuple(sources), index)
    theta = rng.normal(0.0, 0.5, (L, geom.d))
    phi = rng.normal(0.0, 0.5, (L, geom.d))
    Z = rng.uniform(-1.5, 1.5, (4, geom.d))
    T = rng.uniform(-1, 1, (4, geom.d))
    return step, theta, phi, Z, T


def _assert_matches_finite_differences(params, Z, T, t, step, sched, sources=None):
    from fpmc.finetune import finetune_grad, finetune_loss
    _, dtheta, dphi = finetune_grad(params, Z, t, T, step, sched, sources)
    analytic = params.grad_vector(dtheta, dphi)
    vec = params.vector()
    numeric = np.empty_like(vec)
    h = 1e-5
    for i in range(vec.size):
        e = np.zeros_like(vec)
        e[i] = h
        up = finetune_loss(params.with_vector(vec + e), Z, t, T, step, sched, sources)
        down = finetune_loss(params.with_vector(vec - e), Z, t, T, step, sched, sources)
        numeric[i] = (up - down) / (2 * h)
    assert np.linalg.norm(analytic - numeric) <= 1e-4 * np.linalg.norm(numeric) + 1e-10


@pytest.fixture
def pixel_step():
    """d=1，支撑集 {0, 1}，单个估计器"""
    from fpmc.core import Dataset, ImageGeometry, SourceMeasure
    from fpmc.estimator import FpmcStep
    data = Dataset(ImageGeometry(1, 1, 1), np.array([[0.0], [1.0]]))
    return FpmcStep(np.ones((1, 1)), np.ones((1, 1)), (SourceMeasure.uniform(data),))


class TestLogParams:
    """对数参数化测试"""

    def test_init_floor(self):
        """测试二值掩码初始化 theta = log(max(m, 1e-3))"""
        from fpmc.core import Dataset, ImageGeometry, SourceMeasure
        from fpmc.estimator import FpmcStep
        from fpmc.finetune import LogParams
        data = Dataset(ImageGeometry(2, 1, 1), np.zeros((1, 2)))
        step = FpmcStep(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]),
                        (SourceMeasure.uniform(data),))
        params = LogParams.from_step(step)
        np.testing.assert_allclose(params.theta, [[0.0, np.log(1e-3)]])
        np.testing.assert_allclose(params.q(), [[1.0, 1e-3]])
        assert np.all(params.r() > 0)

    def test_frozen_side_keeps_model_values(self, pixel_step):
        """测试单轴模式下冻结的一侧保持原值"""
        from fpmc.finetune import LogParams
        params = LogParams.from_step(pixel_step, which="q")
        assert params.vector().size == 1
        np.testing.assert_array_equal(params.r(), pixel_step.R)

    def test_invalid_mode(self):
        """测试非法训练模式"""
        from fpmc.errors import ValidationError
        from fpmc.finetune import LogParams
        with pytest.raises(ValidationError):
            LogParams(np.zeros((1, 1)), np.zeros((1, 1)), which="both")


class TestFinetuneLoss:
    """微调损失测试"""

    def test_pixel_example(self, pixel_step, edm18):
        """测试 d=1：目标 0.5、输出 0.7311 时损失约 0.0534"""
        from fpmc.finetune import LogParams, finetune_loss
        params = LogParams(np.zeros((1, 1)), np.zeros((1, 1)))
        loss = finetune_loss(params, np.array([0.75]), 0.5, np.array([[0.5]]), pixel_step, edm18)
        assert loss == pytest.approx(0.2310586 ** 2, abs=1e-6)

    def test_zero_weight(self, pixel_step, edm18):
        """测试 lambda=0 时损失为 0"""
        from fpmc.finetune import LogParams, finetune_loss
        params = LogParams(np.zeros((1, 1)), np.zeros((1, 1)))
        assert finetune_loss(params, np.array([0.75]), 0.5, np.array([[0.5]]), pixel_step,
                             edm18, loss_weight=0.0) == 0.0

    def test_perfect_fit(self, small_dataset, edm18):
        """测试目标等于 FPMC 自身输出时损失与梯度为 0"""
        from fpmc.constructors import ScheduleTable, build_pspc_square
        from fpmc.estimator import step_denoise
        from fpmc.finetune import LogParams, finetune_grad
        model = build_pspc_square(ScheduleTable.from_sizes([1.0], [3]), small_dataset)
        step = model.steps[0]
        rng = np.random.default_rng(1)
        params = LogParams(rng.normal(0, 0.3, step.Q.shape), rng.normal(0, 0.3, step.R.shape))
        Z = rng.standard_normal((3, small_dataset.d))
        target = step_denoise(Z, 1.0, params.to_step(step), model.schedule)
        loss, dtheta, dphi = finetune_grad(params, Z, 1.0, target, step, model.schedule)
        assert loss == pytest.approx(0.0, abs=1e-24)
        np.testing.assert_allclose(dtheta, 0.0, atol=1e-12)
        np.testing.assert_allclose(dphi, 0.0, atol=1e-12)

    def test_masking_blocks_memorization(self, edm18):
        """测试留批掩码后源分布不含本批图像，损失无法降到 0"""
        from fpmc.core import Dataset, ImageGeometry, SourceMeasure
        from fpmc.estimator import FpmcStep
        from fpmc.finetune import LogParams, finetune_loss, masked_source
        geom = ImageGeometry(2, 1, 1)
        data = Dataset(geom, np.array([[0.5, -0.5], [-0.2, 0.1]]))
        nu = SourceMeasure.uniform(data)
        step = FpmcStep(np.ones((1, 2)), np.ones((1, 2)), (nu,))
        z = data.images[0][None, :]
        masked = (masked_source(nu, [0]),)
        expected = float(np.sum((data.images[0] - data.images[1]) ** 2))
        for scale in [-3.0, 0.0, 5.0]:
            params = LogParams(np.full((1, 2), scale), np.zeros((1, 2)))
            loss = finetune_loss(params, z, 0.01, data.images[0][None, :], step, edm18, masked)
            assert loss == pytest.approx(expected, rel=1e-12)


class TestFinetuneGrad:
    """解析梯度测试"""

    @pytest.mark.parametrize("which", ["q", "r", "joint"])
    def test_matches_finite_differences(self, which):
        """测试随机小实例上解析梯度与中心差分一致"""
        from fpmc.core import DiffusionSchedule
        from fpmc.finetune import LogParams
        sched = DiffusionSchedule.edm(18)
        rng = np.random.default_rng({"q": 1, "r": 2, "joint": 3}[which])
        for trial in range(20):
            step, theta, phi, Z, T = _random_instance(rng, n_sources=1 + trial % 2)
            params = LogParams(theta, phi, which)
            t = float(rng.uniform(0.3, 2.0))
            _assert_matches_finite_differences(params, Z, T, t, step, sched)

    def test_matches_finite_differences_with_masking(self):
        """测试留批掩码后的源分布上梯度仍与中心差分一致"""
        from fpmc.core import DiffusionSchedule, SourceMeasure
        from fpmc.estimator import FpmcStep
        from fpmc.finetune import LogParams, masked_source
        sched = DiffusionSchedule.edm(18, kind="vp")
        rng = np.random.default_rng(4)
        for _ in range(10):
            step, theta, phi, Z, T = _random_instance(rng)
            data = step.sources[0].dataset
            if data.n < 3:
                continue
            sources = (masked_source(step.sources[0], [0]),)
            step = FpmcStep(step.Q, step.R, (SourceMeasure.uniform(data),))
            _assert_matches_finite_differences(LogParams(theta, phi), Z, T, 0.8, step, sched,
                                               sources)

    def test_single_support_has_no_q_gradient(self, edm18):
        """测试单点支撑集时 theta 梯度为 0"""
        from fpmc.core import Dataset, ImageGeometry, SourceMeasure
        from fpmc.estimator import FpmcStep
        from fpmc.finetune import LogParams, finetune_grad
        geom = ImageGeometry(3, 1, 1)
        data = Dataset(geom, np.array([[0.2, -0.4, 0.9]]))
        step = FpmcStep(np.ones((2, 3)), np.ones((2, 3)), (SourceMeasure.uniform(data),))
        rng = np.random.default_rng(5)
        params = LogParams(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))
        _, dtheta, _ = finetune_grad(params, rng.normal(size=(2, 3)), 0.5,
                                     rng.normal(size=(2, 3)), step, edm18)
        np.testing.assert_allclose(dtheta, 0.0, atol=1e-14)

    def test_monotone_on_convex_toy(self, pixel_step, edm18):
        """测试单参数凸实例上小学习率训练损失单调不增"""
        from fpmc.finetune import (AdamState, FinetuneConfig, LogParams, adamw_step,
                                   finetune_grad)
        cfg = FinetuneConfig(which="q", learning_rate=1e-3)
        params = LogParams(np.zeros((1, 1)), np.zeros((1, 1)), which="q")
        state = AdamState.zeros(1)
        losses = []
        for k in range(10):
            loss, dtheta, dphi = finetune_grad(params, np.array([0.75]), 0.5,
                                               np.array([[0.5]]), pixel_step, edm18)
            losses.append(loss)
            state, vec = adamw_step(state, params.vector(), params.grad_vector(dtheta, dphi),
                                    cfg, k)
            params = params.with_vector(vec)
        assert all(b <= a for a, b in zip(losses, losses[1:]))


class TestSourceMasking:
    """留批掩码与蒙特卡洛子采样测试"""

    def test_renormalizes(self):
        """测试 N=4 均匀分布屏蔽 {0} 后权重为 {0, 1/3, 1/3, 1/3}"""
        from fpmc.core import Dataset, ImageGeometry, SourceMeasure
        from fpmc.finetune import masked_source
        data = Dataset(ImageGeometry(1, 1, 1), np.array([[0.0], [0.1], [0.2], [0.3]]))
        nu = SourceMeasure.uniform(data)
        masked = masked_source(nu, [0])
        np.testing.assert_allclose(masked.weights, [0, 1 / 3, 1 / 3, 1 / 3])
        np.testing.assert_allclose(nu.weights, [0.25] * 4)

    def test_empty_batch(self, small_dataset):
        """测试空批次与负编号不改变源分布"""
        from fpmc.core import SourceMeasure
        from fpmc.finetune import masked_source
        nu = SourceMeasure.uniform(small_dataset)
        assert masked_source(nu, []) is nu
        assert masked_source(nu, [-1, -1]) is nu

    def test_all_masked(self, small_dataset):
        """测试全部屏蔽后报错"""
        from fpmc.core import SourceMeasure
        from fpmc.errors import ValidationError
        from fpmc.finetune import masked_source
        with pytest.raises(ValidationError):
            masked_source(SourceMeasure.uniform(small_dataset), range(small_dataset.n))

    def test_masks_by_origin(self, small_dataset):
        """测试增强副本按来源图像一并屏蔽，平移支撑集同样适用"""
        from fpmc.core import SourceMeasure
        from fpmc.finetune import masked_source
        union = small_dataset.concat(small_dataset.subset([0, 1]))
        masked = masked_source(SourceMeasure.uniform(union), [0])
        assert masked.weights[0] == 0.0 and masked.weights[6] == 0.0
        assert masked.weights[7] > 0.0
        shifted = masked_source(SourceMeasure.translated(small_dataset, [(0, 0), (1, 0)]), [2])
        np.testing.assert_array_equal(shifted.weights[4:6], [0.0, 0.0])

    def test_mc_subsample(self, small_dataset):
        """测试子采样数量、确定性与恒等情形"""
        from fpmc.core import SourceMeasure
        from fpmc.finetune import mc_subsample
        nu = SourceMeasure.uniform(small_dataset)
        assert mc_subsample(nu, small_dataset.n, 0) is nu
        single = mc_subsample(nu, 1, 3)
        assert single.support_rows().size == 1
        a = mc_subsample(nu, 3, [7, 1])
        b = mc_subsample(nu, 3, [7, 1])
        np.testing.assert_array_equal(a.support_rows(), b.support_rows())
        np.testing.assert_allclose(a.weights[a.support_rows()], 1 / 3)

    def test_mc_subsample_invalid(self, small_dataset):
        """测试 k < 1"""
        from fpmc.core import SourceMeasure
        from fpmc.errors import ValidationError
        from fpmc.finetune import mc_subsample
        with pytest.raises(ValidationError):
            mc_subsample(SourceMeasure.uniform(small_dataset), 0, 0)


class TestAdamW:
    """AdamW 测试"""

    def test_zero_gradient_fixed_point(self):
        """测试零梯度、零衰减时参数不变"""
        from fpmc.finetune import AdamState, FinetuneConfig, adamw_step
        params = np.array([0.3, -1.2])
        _, out = adamw_step(AdamState.zeros(2), params, np.zeros(2), FinetuneConfig())
        np.testing.assert_array_equal(out, params)

    def test_first_step(self):
        """测试第一步更新约为 -lr * sign(g)"""
        from fpmc.finetune import AdamState, FinetuneConfig, adamw_step
        cfg = FinetuneConfig(learning_rate=0.05)
        g = np.array([2.0, -0.5])
        state, out = adamw_step(AdamState.zeros(2), np.zeros(2), g, cfg)
        np.testing.assert_allclose(out, -0.05 * g / (np.abs(g) + 1e-8), rtol=1e-10)
        assert state.count == 1

    def test_weight_decay_only(self):
        """测试只有 weight decay 时参数乘以 (1 - lr * wd)"""
        from fpmc.finetune import AdamState, FinetuneConfig, adamw_step
        cfg = FinetuneConfig(learning_rate=0.05, weight_decay=0.01)
        params = np.array([1.0, -2.0])
        _, out = adamw_step(AdamState.zeros(2), params, np.zeros(2), cfg)
        np.testing.assert_allclose(out, params * (1 - 0.05 * 0.01), rtol=1e-15)

    def test_non_finite_gradient(self):
        """测试非有限梯度报错并带步序号"""
        from fpmc.errors import NumericalError
        from fpmc.finetune import AdamState, FinetuneConfig, adamw_step
        with pytest.raises(NumericalError) as info:
            adamw_step(AdamState.zeros(1), np.zeros(1), np.array([np.nan]), FinetuneConfig(), 7)
        assert info.value.step == 7

    def test_weight_decay_rule(self):
        """测试预设的 weight decay 按 t 阈值生效"""
        from fpmc.finetune import weight_decay_for
        assert weight_decay_for(2.0, "cifar10") == 0.01
        assert weight_decay_for(1.0, "cifar10") == 0.0
        assert weight_decay_for(8.03, "afhq64") == 0.01


class TestResponseTable:
    """响应表测试"""

    def test_lookup_and_persistence(self, small_dataset, edm18, temp_dir):
        """测试按 z 查表、读写与 t 检查"""
        from fpmc.classical import OptimalDenoiser
        from fpmc.errors import ValidationError
        from fpmc.finetune import ResponseTable
        denoiser = OptimalDenoiser(small_dataset, edm18)
        table = ResponseTable.from_denoiser(denoiser, small_dataset, 0.5, edm18, n=10, seed=3,
                                            val_rows=2)
        np.testing.assert_allclose(table(table.z[:3], 0.5), denoiser(table.z[:3], 0.5))
        table.save(temp_dir)
        loaded = ResponseTable.load(temp_dir)
        np.testing.assert_array_equal(loaded.z, table.z)
        np.testing.assert_array_equal(loaded.origin, table.origin)
        assert loaded.val_rows == 2
        with pytest.raises(ValidationError):
            loaded(loaded.z[:1], 0.7)
        with pytest.raises(ValidationError):
            loaded(np.zeros(small_dataset.d), 0.5)


class TestFinetuneRun:
    """微调循环测试"""

    @pytest.mark.parametrize("which", ["q", "r", "joint"])
    def test_zero_steps_returns_baseline(self, small_dataset, which):
        """测试 max_steps=0 原样返回基线步，去噪输出与基线一致"""
        from fpmc.classical import OptimalDenoiser
        from fpmc.constructors import ScheduleTable, build_pspc_square
        from fpmc.estimator import step_denoise
        from fpmc.finetune import FinetuneConfig, finetune_run
        model = build_pspc_square(ScheduleTable.from_sizes([1.0], [3]), small_dataset)
        target = OptimalDenoiser(small_dataset, model.schedule)
        result = finetune_run(model, 0, target, FinetuneConfig(which=which, max_steps=0),
                              validation_size=16)
        base = model.steps[0]
        np.testing.assert_array_equal(result.step.Q, base.Q)
        np.testing.assert_array_equal(result.step.R, base.R)
        z = np.random.default_rng(8).standard_normal((4, small_dataset.d))
        np.testing.assert_array_equal(step_denoise(z, 1.0, result.step, model.schedule),
                                      step_denoise(z, 1.0, base, model.schedule))
        assert result.best_epoch == 0
        assert result.best_val_mse == result.baseline_val_mse
        assert result.log == [{"epoch": 0, "val_mse": result.baseline_val_mse}]

    def test_baseline_error_uses_binary_masks(self, small_dataset):
        """测试基线验证误差按未修改的二值掩码计算"""
        from fpmc.classical import OptimalDenoiser
        from fpmc.constructors import ScheduleTable, build_pspc_square
        from fpmc.finetune import FinetuneConfig, finetune_run
        model = build_pspc_square(ScheduleTable.from_sizes([1.0], [3]), small_dataset)
        target = OptimalDenoiser(small_dataset, model.schedule)
        a = finetune_run(model, 0, target, FinetuneConfig(which="joint", max_steps=0),
                         validation_size=16)
        b = finetune_run(model, 0, target,
                         FinetuneConfig(which="joint", max_steps=0, init_floor=0.5),
                         validation_size=16)
        assert a.baseline_val_mse == b.baseline_val_mse
        assert a.baseline_val_mse > 0

    def test_deterministic(self, small_dataset):
        """测试相同种子的两次运行日志与参数完全一致"""
        from fpmc.classical import OptimalDenoiser
        from fpmc.constructors import ScheduleTable, build_ls
        from fpmc.finetune import FinetuneConfig, finetune_run
        model = build_ls(ScheduleTable.from_sizes([0.8], [3]), small_dataset)
        target = OptimalDenoiser(small_dataset, model.schedule)
        cfg = FinetuneConfig(max_steps=4, batch_size=2, seed=9, mc_support_size=4)
        a = finetune_run(model, 0, target, cfg, validation_size=8)
        b = finetune_run(model, 0, target, cfg, validation_size=8)
        assert a.log == b.log
        np.testing.assert_array_equal(a.params.theta, b.params.theta)
        assert sum(1 for record in a.log if "loss" in record) == 4

    def test_improves_on_held_out_oracle(self):
        """测试以 1024 张图像的最优去噪器为目标微调 64 张图像的方块模型，
        三个中间 t 上的 held-out 误差均下降至少 10%"""
        from fpmc.classical import OptimalDenoiser
        from fpmc.constructors import ScheduleTable, build_pspc_square
        from fpmc.core import ImageGeometry
        from fpmc.evaluation import denoiser_error_sweep, relative_error_change
        from fpmc.finetune import FinetuneConfig, finetune_model
        from fpmc.toydata import manifold_dataset
        full = manifold_dataset(1216, ImageGeometry(8, 8, 1), seed=11)
        oracle_data = full.subset(range(1024))
        train = full.subset(range(64))
        validation = full.subset(range(1024, 1088))
        held_out = full.subset(range(1088, 1216))

        model = build_pspc_square(ScheduleTable.from_sizes([5.0, 2.0, 0.5], [3, 3, 3]), train)
        target = OptimalDenoiser(oracle_data, model.schedule)
        cfg = FinetuneConfig(which="joint", max_steps=300, batch_size=32, seed=2,
                             mask_batch=True)
        tuned, results = finetune_model(model, target, cfg, train_data=train,
                                        validation=validation)
        assert all(r.best_epoch >= 1 for r in results)

        times = list(model.schedule.t_grid)
        before = denoiser_error_sweep(model, target, held_out, times, 256, 5, model.schedule)
        after = denoiser_error_sweep(tuned, target, held_out, times, 256, 5, model.schedule)
        assert np.all(relative_error_change(before, after) <= -10.0)

    def test_step_t_mismatch(self, small_dataset):
        """测试配置的 t 与调度步不一致"""
        from fpmc.classical import OptimalDenoiser
        from fpmc.constructors import build_optimal
        from fpmc.core import DiffusionSchedule
        from fpmc.errors import ValidationError
        from fpmc.finetune import FinetuneConfig, finetune_run
        sched = DiffusionSchedule.from_times([2.0, 1.0])
        model = build_optimal(small_dataset, sched)
        with pytest.raises(ValidationError):
            finetune_run(model, 0, OptimalDenoiser(small_dataset, sched),
                         FinetuneConfig(max_steps=0, step_t=1.0))

    def test_response_table_target(self, small_dataset, temp_dir):
        """测试响应表作为目标，并合并为新模型"""
        from pathlib import Path
        from fpmc.classical import OptimalDenoiser
        from fpmc.constructors import ScheduleTable, build_pspc_square
        from fpmc.finetune import FinetuneConfig, ResponseTable, finetune_model
        from fpmc.storage import read_jsonl
        model = build_pspc_square(ScheduleTable.from_sizes([2.0, 0.5], [3, 3]), small_dataset)
        target = OptimalDenoiser(small_dataset, model.schedule)
        table = ResponseTable.from_denoiser(target, small_dataset, 0.5, model.schedule, n=12,
                                            seed=4, val_rows=4)
        cfg = FinetuneConfig(which="joint", max_steps=3, batch_size=4)
        tuned, results = finetune_model(model, {1: table}, cfg, steps=[1], preset="cifar10",
                                        log_dir=temp_dir)
        assert tuned.method == "pspc-square+ft"
        assert len(results) == 1
        np.testing.assert_array_equal(tuned.steps[0].Q, model.steps[0].Q)
        records = read_jsonl(Path(temp_dir) / "step_001.jsonl")
        assert [r["step"] for r in records if "loss" in r] == [0, 1, 2]
        assert all("noise_seed" in r for r in records if "loss" in r)
        assert len(tuned.meta["history"]) == 1
