"""经典去噪器：经验后验均值（最优去噪器）与 Wiener 滤波"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import linalg

from .config import WIENER_DENSE_LIMIT
from .core import Dataset, DiffusionSchedule, ImageGeometry, SourceMeasure, check_time
from .errors import ValidationError
from .estimator import as_batch, support_arrays, posterior_kernel
from .storage import read_json, read_tensor, tensor_path, write_json, write_tensor

logger = logging.getLogger(__name__)


def optimal_denoiser(z: np.ndarray, t: float, data: Dataset,
                     sched: DiffusionSchedule) -> np.ndarray:
    """训练集上的经验后验均值，即 q = 1、均匀源分布的 FPMC"""
    return OptimalDenoiser(data, sched)(z, t)


class OptimalDenoiser:
    """最优去噪器，满足 (z, t) -> D(z, t) 调用约定"""

    def __init__(self, data: Dataset, sched: DiffusionSchedule):
        self.data = data
        self.sched = sched
        self.source = SourceMeasure.uniform(data)
        self._ones = np.ones((1, data.d))
        self._R = np.ones((1, data.d))
        _, self._X, self._logw = support_arrays(self.source)

    @property
    def geometry(self) -> ImageGeometry:
        return self.data.geometry

    def __call__(self, z: np.ndarray, t: float) -> np.ndarray:
        t = check_time(t)
        Z, single = as_batch(z, self.data.d)
        out = posterior_kernel(Z, self.sched.alpha(t), self.sched.sigma(t), self._ones,
                               self._X, self._logw, R=self._R)
        out = out / self._R.sum(axis=0)
        return out[0] if single else out


@dataclass(frozen=True, eq=False)
class WienerModel:
    """数据均值与协方差特征分解 Sigma = U diag(lambda) U^T"""
    mean: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray
    geometry: Optional[ImageGeometry] = None

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        U = np.asarray(self.eigvecs, dtype=np.float64)
        lam = np.clip(np.asarray(self.eigvals, dtype=np.float64).reshape(-1), 0.0, None)
        d = mean.shape[0]
        if U.shape != (d, d) or lam.shape[0] != d:
            raise ValidationError(f"Wiener 模型形状不匹配: mean {d}, U {U.shape}, λ {lam.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "eigvecs", U)
        object.__setattr__(self, "eigvals", lam)

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def from_covariance(cls, mean: np.ndarray, cov: np.ndarray,
                        geometry: Optional[ImageGeometry] = None) -> "WienerModel":
        """由给定协方差构造（用于解析高斯后验对照）"""
        cov = np.asarray(cov, dtype=np.float64)
        lam, U = linalg.eigh((cov + cov.T) / 2.0)
        return cls(mean, U, lam, geometry)

    def covariance(self) -> np.ndarray:
        return (self.eigvecs * self.eigvals) @ self.eigvecs.T

    def shrink(self, t: float, sched: DiffusionSchedule) -> np.ndarray:
        """特征方向上的收缩系数 alpha*lambda / (alpha^2*lambda + sigma^2)"""
        t = check_time(t)
        a, s = sched.alpha(t), sched.sigma(t)
        return a * self.eigvals / (a * a * self.eigvals + s * s)


def fit_wiener(data: Dataset) -> WienerModel:
    """经验均值与协方差 (除以 N) 的对称特征分解，特征值截断到 0"""
    if data.n < 2:
        raise ValidationError(f"拟合 Wiener 滤波至少需要 2 张图像: N={data.n}")
    mean = data.images.mean(axis=0)
    centered = data.images - mean
    cov = centered.T @ centered / data.n
    lam, U = linalg.eigh(cov)
    clipped = int(np.sum(lam < 0))
    if clipped:
        logger.debug(f"{clipped} 个负特征值截断为 0")
    logger.info(f"Wiener 拟合完成: N={data.n}, d={data.d}, 最大特征值 {lam.max():.4g}")
    return WienerModel(mean, U, lam, data.geometry)


def wiener_matrix(model: WienerModel, t: float, sched: DiffusionSchedule) -> np.ndarray:
    """W_t = U diag(alpha*lambda / (alpha^2*lambda + sigma^2)) U^T"""
    if model.d > WIENER_DENSE_LIMIT:
        raise ValidationError(f"d={model.d} 超过显式 Wiener 矩阵上限 {WIENER_DENSE_LIMIT}")
    f = model.shrink(t, sched)
    return (model.eigvecs * f) @ model.eigvecs.T


def wiener_denoise(z: np.ndarray, t: float, model: WienerModel,
                   sched: DiffusionSchedule) -> np.ndarray:
    """x_bar + W_t (z - alpha * x_bar)，按 U、diag、U^T 三次乘法计算"""
    f = model.shrink(t, sched)
    a = sched.alpha(t)
    Z, single = as_batch(z, model.d)
    coeffs = (Z - a * model.mean) @ model.eigvecs
    out = model.mean + (coeffs * f) @ model.eigvecs.T
    return out[0] if single else out


class WienerDenoiser:
    """Wiener 滤波的 (z, t) 调用约定包装"""

    def __init__(self, model: WienerModel, sched: DiffusionSchedule):
        self.model = model
        self.sched = sched

    @property
    def geometry(self) -> Optional[ImageGeometry]:
        return self.model.geometry

    def __call__(self, z: np.ndarray, t: float) -> np.ndarray:
        return wiener_denoise(z, t, self.model, self.sched)


def save_wiener(model: WienerModel, directory: Union[str, Path],
                schedule: Optional[DiffusionSchedule] = None) -> str:
    directory = Path(directory)
    d = model.d
    write_tensor(tensor_path(directory, "mean"), model.mean[None, :], d, dtype="f64")
    write_tensor(tensor_path(directory, "eigvecs"), model.eigvecs, d, dtype="f64")
    write_tensor(tensor_path(directory, "eigvals"), model.eigvals[None, :], d, dtype="f64")
    manifest = {"format": "fpmc-wiener", "version": 1, "d": d,
                "geometry": model.geometry.to_dict() if model.geometry else None,
                "schedule": schedule.to_dict() if schedule is not None else None}
    return write_json(directory / "manifest.json", manifest)


def load_wiener(directory: Union[str, Path]) -> WienerModel:
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    if manifest.get("format") != "fpmc-wiener":
        raise ValidationError(f"不是 Wiener 模型目录: {directory}")
    mean, _ = read_tensor(tensor_path(directory, "mean"))
    U, _ = read_tensor(tensor_path(directory, "eigvecs"))
    lam, _ = read_tensor(tensor_path(directory, "eigvals"))
    geometry = ImageGeometry.from_dict(manifest["geometry"]) if manifest.get("geometry") else None
    return WienerModel(mean[0], U, lam[0], geometry)
