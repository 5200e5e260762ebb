"""确定性 PF-ODE 采样：EDM 时间网格上的 Heun 二阶求解器"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .core import DiffusionSchedule, check_time
from .errors import NumericalError, ValidationError
from .storage import array_digest

logger = logging.getLogger(__name__)

Denoiser = Callable[[np.ndarray, float], np.ndarray]


@dataclass
class SamplerConfig:
    """采样配置；采样参数化固定为 alpha(t)=1, sigma(t)=t"""
    schedule: DiffusionSchedule
    denoiser: Denoiser
    seed: int = 0
    batch: int = 1
    d: Optional[int] = None
    record_trajectory: bool = False

    def __post_init__(self):
        if self.schedule.kind != "edm":
            raise ValidationError(f"采样只支持 alpha=1, sigma=t 的调度, 当前: {self.schedule.kind}")
        if self.batch < 1:
            raise ValidationError(f"采样数量必须 >= 1: {self.batch}")
        if self.d is None:
            geometry = getattr(self.denoiser, "geometry", None)
            if geometry is None:
                raise ValidationError("无法从去噪器推断维度，请指定 d")
            self.d = geometry.d

    @property
    def t_max(self) -> float:
        return float(self.schedule.t_grid[0])


@dataclass
class SampleResult:
    x: np.ndarray
    n_evals: int
    noise_digest: str
    trajectory: List[Tuple[float, np.ndarray]] = field(default_factory=list)


def sample_prior(config: SamplerConfig) -> np.ndarray:
    """pi(z) = N(0, T^2 I)，同一种子下所有去噪器共享初始噪声"""
    rng = np.random.default_rng(config.seed)
    return rng.standard_normal((config.batch, config.d)) * config.t_max


def ode_drift(z: np.ndarray, t: float, denoised: np.ndarray) -> np.ndarray:
    """dz/dt = (z - D(z, t)) / t"""
    t = check_time(t)
    return (np.asarray(z, dtype=np.float64) - denoised) / t


def _checked(z: np.ndarray, k: int, t: float) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        bad = int(np.sum(~np.all(np.isfinite(z), axis=1)))
        raise NumericalError(f"采样第 {k} 步 (t={t:.4g}) 出现非有限状态: {bad} 个样本", step=k)
    return z


def heun_sample(config: SamplerConfig, z: Optional[np.ndarray] = None) -> SampleResult:
    """
    Heun 求解 PF-ODE：相邻网格时间之间 Euler 预测 + 梯形校正，
    最后一步到 t=0 只做 Euler。M 个网格时间共调用去噪器 2M-1 次。

    Args:
        config: 采样配置
        z: 初始噪声，默认由 sample_prior 生成
    """
    if z is None:
        z = sample_prior(config)
    z = np.array(z, dtype=np.float64).reshape(-1, config.d)
    digest = array_digest(z)
    grid = list(config.schedule.t_grid) + [0.0]
    trajectory = [(float(grid[0]), z.copy())] if config.record_trajectory else []
    n_evals = 0

    for k in range(len(grid) - 1):
        t, t_next = float(grid[k]), float(grid[k + 1])
        drift = ode_drift(z, t, config.denoiser(z, t))
        n_evals += 1
        z_pred = _checked(z + (t_next - t) * drift, k, t)
        if t_next > 0:
            drift_next = ode_drift(z_pred, t_next, config.denoiser(z_pred, t_next))
            n_evals += 1
            z = _checked(z + 0.5 * (t_next - t) * (drift + drift_next), k, t)
        else:
            z = z_pred
        if config.record_trajectory:
            trajectory.append((t_next, z.copy()))
        logger.debug(f"采样步 {k}: t {t:.4g} -> {t_next:.4g}")

    logger.info(f"采样完成: {config.batch} 个样本, 每个样本 {n_evals} 次去噪器调用")
    return SampleResult(z, n_evals, digest, trajectory)
