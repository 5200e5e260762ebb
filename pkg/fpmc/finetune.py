"""Q/R 微调：对数参数化、解析梯度、AdamW、留批掩码与蒙特卡洛子采样"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import FINETUNE_DEFAULTS, PRESETS
from .core import Dataset, DiffusionSchedule, ImageGeometry, SourceMeasure, check_time
from .errors import NumericalError, ValidationError
from .estimator import (FpmcModel, FpmcStep, as_batch, batch_chunk, support_arrays,
                        posterior_kernel, step_denoise)
from .storage import read_json, read_tensor, tensor_path, write_json, write_jsonl, write_tensor

logger = logging.getLogger(__name__)

Target = Callable[[np.ndarray, float], np.ndarray]
TRAIN_MODES = ("q", "r", "joint")


@dataclass(eq=False)
class LogParams:
    """q = exp(theta)、r = exp(phi)；单轴模式下冻结的一侧保留模型原值"""
    theta: np.ndarray
    phi: np.ndarray
    which: str = "joint"
    fixed_q: Optional[np.ndarray] = None
    fixed_r: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.which not in TRAIN_MODES:
            raise ValidationError(f"训练模式必须是 {TRAIN_MODES} 之一: {self.which}")
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.theta.shape != self.phi.shape:
            raise ValidationError(f"theta/phi 形状不一致: {self.theta.shape} vs {self.phi.shape}")

    @classmethod
    def from_step(cls, step: FpmcStep, which: str = "joint",
                  floor: float = FINETUNE_DEFAULTS["init_floor"]) -> "LogParams":
        """二值掩码初始化: theta = log(max(q, floor))"""
        theta = np.log(np.maximum(step.Q, floor))
        phi = np.log(np.maximum(step.R, floor))
        return cls(theta, phi, which, fixed_q=np.array(step.Q), fixed_r=np.array(step.R))

    @property
    def trains_q(self) -> bool:
        return self.which in ("q", "joint")

    @property
    def trains_r(self) -> bool:
        return self.which in ("r", "joint")

    def q(self) -> np.ndarray:
        if self.trains_q or self.fixed_q is None:
            return np.exp(self.theta)
        return self.fixed_q

    def r(self) -> np.ndarray:
        if self.trains_r or self.fixed_r is None:
            return np.exp(self.phi)
        return self.fixed_r

    def vector(self) -> np.ndarray:
        parts = []
        if self.trains_q:
            parts.append(self.theta.ravel())
        if self.trains_r:
            parts.append(self.phi.ravel())
        return np.concatenate(parts)

    def with_vector(self, vec: np.ndarray) -> "LogParams":
        vec = np.asarray(vec, dtype=np.float64)
        size = self.theta.size
        theta, phi = self.theta, self.phi
        offset = 0
        if self.trains_q:
            theta = vec[:size].reshape(self.theta.shape)
            offset = size
        if self.trains_r:
            phi = vec[offset:offset + size].reshape(self.phi.shape)
        return replace(self, theta=theta, phi=phi)

    def grad_vector(self, dtheta: np.ndarray, dphi: np.ndarray) -> np.ndarray:
        parts = []
        if self.trains_q:
            parts.append(dtheta.ravel())
        if self.trains_r:
            parts.append(dphi.ravel())
        return np.concatenate(parts)

    def to_step(self, step: FpmcStep) -> FpmcStep:
        return step.replace(Q=self.q(), R=self.r())


@dataclass
class FinetuneConfig:
    """单个调度步的微调配置"""
    which: str = "joint"
    loss_weight: float = FINETUNE_DEFAULTS["loss_weight"]
    learning_rate: float = FINETUNE_DEFAULTS["learning_rate"]
    betas: Tuple[float, float] = FINETUNE_DEFAULTS["betas"]
    eps: float = FINETUNE_DEFAULTS["eps"]
    weight_decay: float = 0.0
    batch_size: int = FINETUNE_DEFAULTS["batch_size"]
    max_steps: int = FINETUNE_DEFAULTS["max_steps"]
    mc_support_size: Optional[int] = None
    seed: int = 0
    mask_batch: bool = True
    init_floor: float = FINETUNE_DEFAULTS["init_floor"]
    step_t: Optional[float] = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError(f"学习率必须为正: {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size 至少为 1: {self.batch_size}")
        if self.max_steps < 0:
            raise ValidationError(f"max_steps 不能为负: {self.max_steps}")
        if self.which not in TRAIN_MODES:
            raise ValidationError(f"训练模式必须是 {TRAIN_MODES} 之一: {self.which}")
        self.betas = tuple(self.betas)

    def to_dict(self) -> Dict:
        data = dict(self.__dict__)
        data["betas"] = list(self.betas)
        return data


def weight_decay_for(t: float, preset: str,
                     decay: float = FINETUNE_DEFAULTS["weight_decay"]) -> float:
    """预设的 weight decay 规则: t 不小于阈值时为 decay，否则为 0"""
    if preset not in PRESETS:
        raise ValidationError(f"未知预设: {preset}")
    return decay if t >= PRESETS[preset]["weight_decay_min_t"] else 0.0


def masked_source(nu: SourceMeasure, batch_indices: Sequence[int]) -> SourceMeasure:
    """
    留批掩码：清除来源于本批训练图像的支撑点并重新归一化

    batch_indices 是训练图像编号（Dataset.origin 取值）；负编号不对应训练图像，忽略。
    """
    batch = np.unique(np.asarray(batch_indices, dtype=np.int64))
    batch = batch[batch >= 0]
    if batch.size == 0:
        return nu
    hit = np.isin(nu.origin(), batch)
    remaining = nu.active & ~hit & (nu.weights > 0)
    if not np.any(remaining):
        raise ValidationError("留批掩码后源分布为空 (empty support)")
    return nu.with_active(nu.active & ~hit)


def mc_subsample(nu: SourceMeasure, k: int, seed) -> SourceMeasure:
    """按权重无放回抽取 k 个支撑点，抽中的点取均匀权重"""
    if k < 1:
        raise ValidationError(f"子采样数量至少为 1: {k}")
    rows = nu.support_rows()
    if rows.size == 0:
        raise ValidationError("源分布为空 (empty support)")
    if k >= rows.size:
        return nu
    rng = np.random.default_rng(seed)
    chosen = rng.choice(rows, size=k, replace=False, p=nu.weights[rows] / nu.weights[rows].sum())
    active = np.zeros(nu.size, dtype=bool)
    active[chosen] = True
    return SourceMeasure(nu.dataset, np.ones(nu.size), active, nu.shifts)


def _evaluate(params: LogParams, Z: np.ndarray, T: np.ndarray, t: float, step: FpmcStep,
              sched: DiffusionSchedule, sources: Optional[Tuple[SourceMeasure, ...]],
              loss_weight: float, need_grad: bool):
    t = check_time(t)
    alpha, sigma = sched.alpha(t), sched.sigma(t)
    sources = step.sources if sources is None else tuple(sources)
    q, r = params.q(), params.r()
    B, d = Z.shape
    S = r.sum(axis=0)

    mus = np.empty((q.shape[0], B, d))
    cache = []
    for g, idx in step.groups():
        _, X, logw = support_arrays(sources[g])
        if need_grad and params.trains_q:
            mu, P = posterior_kernel(Z, alpha, sigma, q[idx], X, logw, want_weights=True)
            cache.append((idx, X, P))
        else:
            mu = posterior_kernel(Z, alpha, sigma, q[idx], X, logw)
        mus[idx] = mu
    D = np.einsum("ld,lbd->bd", r, mus) / S
    resid = T - D
    loss = float(loss_weight * np.mean(np.sum(resid * resid, axis=1)))
    if not np.isfinite(loss):
        raise NumericalError(f"损失为非有限值 (t={t:.4g})")
    if not need_grad:
        return loss

    gD = -2.0 * loss_weight / B * resid
    dtheta = np.zeros_like(q)
    dphi = np.zeros_like(r)
    if params.trains_r:
        dr = np.einsum("bd,lbd->ld", gD, mus - D[None, :, :]) / S
        dphi = r * dr
    if params.trains_q:
        gmu = gD[None, :, :] * (r / S)[:, None, :]
        dq = np.zeros_like(q)
        for idx, X, P in cache:
            g_mu = gmu[idx]
            base = np.sum(g_mu * mus[idx], axis=-1, keepdims=True)
            G = P * (g_mu @ X.T - base)
            M = X.shape[0]
            step_size = batch_chunk(M, d)
            for start in range(0, B, step_size):
                stop = min(B, start + step_size)
                resid_x = alpha * X[None, :, :] - Z[start:stop, None, :]
                sq = (resid_x * resid_x).reshape(-1, d)
                dq[idx] += G[:, start:stop, :].reshape(len(idx), -1) @ sq
        dq *= -0.5 / (sigma * sigma)
        dtheta = q * dq
    return loss, dtheta, dphi


def _targets(target: Union[Target, np.ndarray], Z: np.ndarray, t: float) -> np.ndarray:
    if callable(target):
        return np.atleast_2d(np.asarray(target(Z, t), dtype=np.float64))
    return np.atleast_2d(np.asarray(target, dtype=np.float64))


def finetune_loss(params: LogParams, z: np.ndarray, t: float, target: Union[Target, np.ndarray],
                  step: FpmcStep, sched: DiffusionSchedule,
                  sources: Optional[Tuple[SourceMeasure, ...]] = None,
                  loss_weight: float = 1.0) -> float:
    """lambda(t) * 批平均 ||target(z, t) - D(z, t)||^2；target 可为可调用对象或已算好的响应"""
    Z, _ = as_batch(z, step.geometry.d)
    return _evaluate(params, Z, _targets(target, Z, t), t, step, sched, sources, loss_weight,
                     need_grad=False)


def finetune_grad(params: LogParams, z: np.ndarray, t: float, target: Union[Target, np.ndarray],
                  step: FpmcStep, sched: DiffusionSchedule,
                  sources: Optional[Tuple[SourceMeasure, ...]] = None,
                  loss_weight: float = 1.0) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    损失及其对 theta、phi 的解析梯度

    Returns:
        (loss, dtheta, dphi)；未训练的一侧梯度为 0
    """
    Z, _ = as_batch(z, step.geometry.d)
    return _evaluate(params, Z, _targets(target, Z, t), t, step, sched, sources, loss_weight,
                     need_grad=True)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adamw_step(state: AdamState, params: np.ndarray, grads: np.ndarray, cfg: FinetuneConfig,
               step_index: int = 0) -> Tuple[AdamState, np.ndarray]:
    """解耦 weight decay 的 Adam 更新"""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValidationError(f"参数/梯度形状不匹配: {params.shape} vs {grads.shape}")
    if not np.all(np.isfinite(grads)):
        raise NumericalError(f"第 {step_index} 步梯度出现非有限值", step=step_index)
    beta1, beta2 = cfg.betas
    count = state.count + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1 ** count)
    v_hat = v / (1 - beta2 ** count)
    updated = params * (1 - cfg.learning_rate * cfg.weight_decay)
    updated = updated - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    if not np.all(np.isfinite(updated)):
        raise NumericalError(f"第 {step_index} 步参数出现非有限值", step=step_index)
    return AdamState(m, v, count), updated


@dataclass(frozen=True, eq=False)
class ResponseTable:
    """
    外部目标去噪器的响应表：(z, response) 对，t 固定

    origin 为每行 z 对应的训练图像编号（-1 表示未知），最后 val_rows 行用作验证集。
    """
    geometry: ImageGeometry
    z: np.ndarray
    response: np.ndarray
    t: float
    origin: Optional[np.ndarray] = None
    val_rows: int = 0

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        response = np.asarray(self.response, dtype=np.float64)
        if z.shape != response.shape or z.ndim != 2 or z.shape[1] != self.geometry.d:
            raise ValidationError(f"响应表形状不匹配: z {z.shape}, response {response.shape}")
        origin = np.full(z.shape[0], -1, dtype=np.int64) if self.origin is None else \
            np.asarray(self.origin, dtype=np.int64).reshape(-1)
        if origin.shape[0] != z.shape[0]:
            raise ValidationError("响应表 origin 长度不匹配")
        if not 0 <= self.val_rows < z.shape[0]:
            raise ValidationError(f"验证行数无效: {self.val_rows}")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "response", response)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "t", check_time(self.t))
        object.__setattr__(self, "_lookup", {row.tobytes(): i for i, row in enumerate(z)})

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def split(self) -> Tuple[np.ndarray, np.ndarray]:
        n_train = self.n - self.val_rows
        return np.arange(n_train), np.arange(n_train, self.n)

    def __call__(self, z: np.ndarray, t: float) -> np.ndarray:
        if not np.isclose(t, self.t, rtol=1e-9, atol=0.0):
            raise ValidationError(f"响应表只覆盖 t={self.t}，请求 t={t}")
        Z, single = as_batch(z, self.geometry.d)
        try:
            rows = [self._lookup[row.tobytes()] for row in Z]
        except KeyError:
            raise ValidationError("请求的 z 不在响应表中")
        out = self.response[rows]
        return out[0] if single else out

    @classmethod
    def from_denoiser(cls, denoiser: Target, data: Dataset, t: float, sched: DiffusionSchedule,
                      n: int, seed: int, val_rows: int = 0) -> "ResponseTable":
        """用任意去噪器生成响应表，x 从 data 中有放回抽取"""
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, data.n, size=n)
        eps = rng.standard_normal((n, data.d))
        z = sched.alpha(t) * data.images[idx] + sched.sigma(t) * eps
        return cls(data.geometry, z, denoiser(z, t), t, data.origin[idx], val_rows)

    def save(self, directory: Union[str, Path]) -> str:
        directory = Path(directory)
        g = self.geometry
        write_tensor(tensor_path(directory, "z"), self.z, g.width, g.height, g.channels, "f64")
        write_tensor(tensor_path(directory, "response"), self.response, g.width, g.height,
                     g.channels, "f64")
        return write_json(directory / "manifest.json",
                          {"format": "fpmc-responses", "geometry": g.to_dict(), "t": self.t,
                           "val_rows": self.val_rows, "origin": self.origin.tolist()})

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "ResponseTable":
        directory = Path(directory)
        manifest = read_json(directory / "manifest.json")
        if manifest.get("format") != "fpmc-responses":
            raise ValidationError(f"不是响应表目录: {directory}")
        z, _ = read_tensor(tensor_path(directory, "z"))
        response, _ = read_tensor(tensor_path(directory, "response"))
        return cls(ImageGeometry.from_dict(manifest["geometry"]), z, response,
                   float(manifest["t"]), manifest.get("origin"), int(manifest.get("val_rows", 0)))


@dataclass
class FinetuneResult:
    step: FpmcStep
    params: LogParams
    log: List[Dict] = field(default_factory=list)
    baseline_val_mse: float = float("nan")
    best_val_mse: float = float("nan")
    best_epoch: int = 0

    def write_log(self, path: Union[str, Path]) -> str:
        return write_jsonl(path, self.log)


def _noise_seed(seed: int, stream: int, index: int) -> List[int]:
    return [int(seed), int(stream), int(index)]


def finetune_run(model: FpmcModel, step: int, target: Union[Target, ResponseTable],
                 cfg: FinetuneConfig, train_data: Optional[Dataset] = None,
                 validation: Optional[Dataset] = None, validation_size: int = 256) -> FinetuneResult:
    """
    单个调度步的微调循环，按验证集 MSE 选取最优检查点

    Args:
        model: 基线 FPMC 模型
        step: 调度步序号
        target: 目标去噪器，或该步的响应表
        cfg: 微调配置
        train_data: 训练批次的 x 来源（默认为第一个源分布的数据集）
        validation: 验证集 x（默认与 train_data 相同）
        validation_size: 验证集 z 的数量

    Returns:
        FinetuneResult，含最优参数对应的 FpmcStep 与训练日志
    """
    sched = model.schedule
    t = float(sched.t_grid[step])
    if cfg.step_t is not None and not np.isclose(cfg.step_t, t, rtol=1e-9, atol=0.0):
        raise ValidationError(f"step_t={cfg.step_t} 与第 {step} 步 t={t} 不一致")
    base = model.steps[step]
    alpha, sigma = sched.alpha(t), sched.sigma(t)
    train_data = train_data or base.sources[0].dataset

    if isinstance(target, ResponseTable):
        if not np.isclose(target.t, t, rtol=1e-9, atol=0.0):
            raise ValidationError(f"响应表 t={target.t} 与第 {step} 步 t={t} 不一致")
        train_rows, val_rows = target.split()
        if val_rows.size == 0:
            val_rows = train_rows
        n_train = train_rows.size
        Z_val, T_val = target.z[val_rows], target.response[val_rows]

        def batch_at(rows, step_no):
            rows = train_rows[rows]
            return target.z[rows], target.response[rows], target.origin[rows]
    else:
        n_train = train_data.n
        val_data = validation or train_data
        val_rng = np.random.default_rng(_noise_seed(cfg.seed, 1, 0))
        val_idx = val_rng.integers(0, val_data.n, size=validation_size)
        Z_val = alpha * val_data.images[val_idx] + \
            sigma * val_rng.standard_normal((validation_size, val_data.d))
        T_val = _targets(target, Z_val, t)

        def batch_at(rows, step_no):
            noise = np.random.default_rng(_noise_seed(cfg.seed, 0, step_no))
            x = train_data.images[rows]
            z = alpha * x + sigma * noise.standard_normal(x.shape)
            return z, _targets(target, z, t), train_data.origin[rows]

    def validate(candidate: FpmcStep) -> float:
        D = step_denoise(Z_val, t, candidate, sched)
        return float(np.mean((T_val - D) ** 2))

    if n_train == 0:
        raise ValidationError("训练集为空")
    params = LogParams.from_step(base, cfg.which, cfg.init_floor)
    # epoch 0 是未修改的基线；下限初始化只作为优化起点
    baseline = validate(base)
    log: List[Dict] = [{"epoch": 0, "val_mse": baseline}]
    best_step, best_params, best_val, best_epoch = base, params, baseline, 0
    logger.info(f"第 {step} 步 (t={t:.4g}) 微调开始: 基线验证 MSE {baseline:.6g}")

    rng = np.random.default_rng(_noise_seed(cfg.seed, 2, 0))
    state = AdamState.zeros(params.vector().size)
    step_no, epoch = 0, 0
    distinct = {id(s): s for s in base.sources}
    while step_no < cfg.max_steps:
        perm = rng.permutation(n_train)
        for start in range(0, n_train, cfg.batch_size):
            if step_no >= cfg.max_steps:
                break
            Z, T, origins = batch_at(perm[start:start + cfg.batch_size], step_no)
            replaced = {}
            for key, nu in distinct.items():
                current = masked_source(nu, origins) if cfg.mask_batch else nu
                if cfg.mc_support_size:
                    current = mc_subsample(current, cfg.mc_support_size,
                                           _noise_seed(cfg.seed, 3, step_no))
                replaced[key] = current
            sources = tuple(replaced[id(s)] for s in base.sources)
            loss, dtheta, dphi = _evaluate(params, Z, T, t, base, sched, sources,
                                           cfg.loss_weight, need_grad=True)
            state, vec = adamw_step(state, params.vector(), params.grad_vector(dtheta, dphi),
                                    cfg, step_no)
            params = params.with_vector(vec)
            if (params.trains_q and not np.all(params.q() > 0)) or \
                    (params.trains_r and not np.all(params.r() > 0)):
                raise NumericalError(f"第 {step_no} 步 q/r 失去正性", step=step_no)
            log.append({"step": step_no, "loss": loss,
                        "noise_seed": _noise_seed(cfg.seed, 0, step_no)})
            step_no += 1
        epoch += 1
        candidate = params.to_step(base)
        val = validate(candidate)
        log.append({"epoch": epoch, "val_mse": val})
        logger.info(f"第 {step} 步 epoch {epoch}: 训练步 {step_no}, 验证 MSE {val:.6g}")
        if val < best_val:
            best_step, best_params, best_val, best_epoch = candidate, params, val, epoch

    return FinetuneResult(best_step, best_params, log, baseline, best_val,
                          best_epoch)


def finetune_model(model: FpmcModel, targets: Union[Target, Dict[int, ResponseTable]],
                   cfg: FinetuneConfig, steps: Optional[Sequence[int]] = None,
                   train_data: Optional[Dataset] = None, validation: Optional[Dataset] = None,
                   preset: Optional[str] = None, log_dir: Optional[Union[str, Path]] = None
                   ) -> Tuple[FpmcModel, List[FinetuneResult]]:
    """逐步微调并合并最优检查点为新模型"""
    steps = list(range(model.schedule.num_steps)) if steps is None else list(steps)
    results = []
    current = model
    for k in steps:
        step_cfg = cfg
        if preset is not None:
            step_cfg = replace(cfg, weight_decay=weight_decay_for(model.schedule.t_grid[k], preset))
        target = targets[k] if isinstance(targets, dict) else targets
        result = finetune_run(model, k, target, step_cfg, train_data, validation)
        if log_dir is not None:
            result.write_log(Path(log_dir) / f"step_{k:03d}.jsonl")
        current = current.with_step(k, result.step,
                                    note=f"finetune step {k} which={cfg.which} "
                                         f"val {result.baseline_val_mse:.6g}->{result.best_val_mse:.6g}")
        results.append(result)
    return FpmcModel(current.schedule, current.steps, current.method + "+ft", current.meta), results
