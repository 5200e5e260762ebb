"""合成数据集：低维流形图像与高斯数据，用于测试和演示"""
import logging
from typing import Optional, Tuple

import numpy as np

from .core import Dataset, ImageGeometry
from .errors import ValidationError

logger = logging.getLogger(__name__)

# 流形基底与种子无关，不同种子得到同一分布的独立样本
BASIS_SEED = 20240601


def manifold_basis(geom: ImageGeometry, rank: int) -> np.ndarray:
    """rank 个低频余弦图案，形状 (rank, d)"""
    rng = np.random.default_rng([BASIS_SEED, geom.width, geom.height, geom.channels, rank])
    ys, xs = np.mgrid[0:geom.height, 0:geom.width].astype(np.float64)
    basis = np.empty((rank, geom.d))
    for k in range(rank):
        fx, fy = rng.uniform(0.0, 1.5, size=2)
        phase = rng.uniform(0.0, 2 * np.pi, size=geom.channels)
        pattern = np.stack([np.cos(np.pi * (fx * xs / geom.width + fy * ys / geom.height) * 2
                                   + phase[c]) for c in range(geom.channels)], axis=-1)
        basis[k] = geom.flatten(pattern)
    return basis


def manifold_dataset(n: int, geom: ImageGeometry, seed: int = 0, rank: int = 3,
                     noise: float = 0.05) -> Dataset:
    """
    低维光滑流形加噪声的图像，经 tanh 压缩到 [-1, 1]

    Args:
        n: 图像数
        geom: 图像几何
        seed: 采样种子，不同种子互相独立
        rank: 流形维数
        noise: 逐像素噪声标准差
    """
    if n < 1 or rank < 1:
        raise ValidationError(f"n 和 rank 必须 >= 1: n={n}, rank={rank}")
    if noise < 0:
        raise ValidationError(f"噪声标准差不能为负: {noise}")
    rng = np.random.default_rng(seed)
    latent = rng.standard_normal((n, rank))
    images = np.tanh(0.6 * latent @ manifold_basis(geom, rank) / np.sqrt(rank)
                     + noise * rng.standard_normal((n, geom.d)))
    logger.debug(f"生成流形数据: n={n}, rank={rank}, seed={seed}")
    return Dataset(geom, images, provenance=(f"toy:manifold:{rank}:{noise}:{seed}",))


def gaussian_dataset(n: int, geom: ImageGeometry, seed: int = 0, scale: float = 0.15,
                     cov: Optional[np.ndarray] = None) -> Tuple[Dataset, np.ndarray, np.ndarray]:
    """
    零均值附近的高斯图像（截断到 [-1, 1]）

    Returns:
        (数据集, 真实均值, 真实协方差)
    """
    rng = np.random.default_rng(seed)
    d = geom.d
    if cov is None:
        A = rng.standard_normal((d, d)) / np.sqrt(d)
        cov = scale * scale * (A @ A.T + 0.1 * np.eye(d))
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (d, d):
        raise ValidationError(f"协方差形状应为 ({d}, {d}): {cov.shape}")
    mean = np.zeros(d)
    images = rng.multivariate_normal(mean, cov, size=n, method="eigh")
    return Dataset(geom, np.clip(images, -1.0, 1.0), provenance=(f"toy:gaussian:{seed}",)), mean, cov
