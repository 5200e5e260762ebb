"""源数据增强：翻转、平移、旋转、缩放，按标签去重与子采样，合成数据导入"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .config import (AUGMENT_PROPOSALS_PER_IMAGE, AUGMENT_STRATEGIES, LABEL_DECIMALS,
                     REFLECTION_STRATEGIES, SCALE_LOG_STD, TRANSLATE_FRACTION)
from .core import Dataset, ImageGeometry, run_parallel
from .errors import ValidationError
from .storage import write_jsonl

logger = logging.getLogger(__name__)


def _grid(img: np.ndarray, geom: ImageGeometry) -> np.ndarray:
    return geom.unflatten(np.asarray(img, dtype=np.float64))


def hflip(img: np.ndarray, geom: ImageGeometry) -> np.ndarray:
    """左右翻转"""
    return geom.flatten(_grid(img, geom)[..., :, ::-1, :])


def vflip(img: np.ndarray, geom: ImageGeometry) -> np.ndarray:
    """上下翻转"""
    return geom.flatten(_grid(img, geom)[..., ::-1, :, :])


def _resample(img: np.ndarray, geom: ImageGeometry, src_x: np.ndarray,
              src_y: np.ndarray) -> np.ndarray:
    """双线性采样 out(x, y) = in(src_x, src_y)，图像外按反射填充"""
    grid = _grid(img, geom)
    out = np.empty_like(grid)
    coords = np.stack([src_y, src_x])
    for c in range(geom.channels):
        out[..., c] = ndimage.map_coordinates(grid[..., c], coords, order=1, mode="mirror")
    return geom.flatten(np.clip(out, -1.0, 1.0))


def _pixel_grid(geom: ImageGeometry) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:geom.height, 0:geom.width].astype(np.float64)
    return xs, ys


def _center(geom: ImageGeometry) -> Tuple[float, float]:
    return (geom.width - 1) / 2.0, (geom.height - 1) / 2.0


def translate(img: np.ndarray, dx: float, dy: float, geom: ImageGeometry) -> np.ndarray:
    """平移 (dx, dy) 像素：out(x, y) = in(x - dx, y - dy)"""
    if not (np.isfinite(dx) and np.isfinite(dy)):
        raise ValidationError(f"平移量必须有限: ({dx}, {dy})")
    if dx == 0 and dy == 0:
        return np.array(img, dtype=np.float64)
    xs, ys = _pixel_grid(geom)
    return _resample(img, geom, xs - dx, ys - dy)


def rotate(img: np.ndarray, theta: float, geom: ImageGeometry) -> np.ndarray:
    """绕图像中心旋转 theta 弧度"""
    if not np.isfinite(theta):
        raise ValidationError(f"旋转角必须有限: {theta}")
    if theta == 0:
        return np.array(img, dtype=np.float64)
    xs, ys = _pixel_grid(geom)
    cx, cy = _center(geom)
    cos, sin = np.cos(theta), np.sin(theta)
    u, v = xs - cx, ys - cy
    return _resample(img, geom, cx + cos * u + sin * v, cy - sin * u + cos * v)


def scale(img: np.ndarray, s: float, geom: ImageGeometry) -> np.ndarray:
    """绕图像中心缩放：s > 1 放大后中心裁剪，s < 1 缩小后反射填充"""
    if not (np.isfinite(s) and s > 0):
        raise ValidationError(f"缩放系数必须为正: {s}")
    if s == 1:
        return np.array(img, dtype=np.float64)
    xs, ys = _pixel_grid(geom)
    cx, cy = _center(geom)
    return _resample(img, geom, cx + (xs - cx) / s, cy + (ys - cy) / s)


@dataclass(frozen=True)
class AugmentationLabel:
    """一次增强的参数描述，用于去重和追溯"""
    strategy: str
    params: Tuple[float, ...]
    source_index: int

    def key(self) -> Tuple:
        return (self.strategy, self.source_index,
                tuple(round(float(p), LABEL_DECIMALS) for p in self.params))

    def to_dict(self, output_index: Optional[int] = None) -> Dict:
        return {"strategy": self.strategy, "params": [float(p) for p in self.params],
                "source_index": self.source_index, "output_index": output_index}


def sample_label(strategy: str, geom: ImageGeometry, rng: np.random.Generator,
                 source_index: int) -> AugmentationLabel:
    """按策略的分布采样增强参数"""
    if strategy in REFLECTION_STRATEGIES:
        params: Tuple[float, ...] = ()
    elif strategy == "translate":
        eps = rng.standard_normal(2)
        params = (float(eps[0] * geom.width * TRANSLATE_FRACTION),
                  float(eps[1] * geom.height * TRANSLATE_FRACTION))
    elif strategy == "rotate":
        params = (float(rng.uniform(-np.pi, np.pi)),)
    elif strategy == "scale":
        params = (float(np.exp(rng.normal(0.0, SCALE_LOG_STD))),)
    else:
        raise ValidationError(f"未知增强策略: {strategy}，可选 {AUGMENT_STRATEGIES}")
    return AugmentationLabel(strategy, params, int(source_index))


def apply_label(img: np.ndarray, label: AugmentationLabel, geom: ImageGeometry) -> np.ndarray:
    if label.strategy == "hflip":
        return hflip(img, geom)
    if label.strategy == "vflip":
        return vflip(img, geom)
    if label.strategy == "translate":
        return translate(img, label.params[0], label.params[1], geom)
    if label.strategy == "rotate":
        return rotate(img, label.params[0], geom)
    if label.strategy == "scale":
        return scale(img, label.params[0], geom)
    raise ValidationError(f"未知增强策略: {label.strategy}")


def dedup_labels(labels: Sequence[AugmentationLabel]) -> List[AugmentationLabel]:
    """按量化参数去重，保留首次出现的顺序"""
    seen = set()
    unique = []
    for label in labels:
        key = label.key()
        if key not in seen:
            seen.add(key)
            unique.append(label)
    return unique


@dataclass
class AugmentPlan:
    """增强计划：|D'| = floor(fraction * N)"""
    strategy: str
    fraction: float
    seed: int = 0
    proposals_per_image: int = AUGMENT_PROPOSALS_PER_IMAGE

    def __post_init__(self):
        if self.strategy not in AUGMENT_STRATEGIES:
            raise ValidationError(f"未知增强策略: {self.strategy}，可选 {AUGMENT_STRATEGIES}")
        if not self.fraction > 0:
            raise ValidationError(f"增强比例必须为正: {self.fraction}")
        if self.strategy in REFLECTION_STRATEGIES and self.fraction > 1:
            raise ValidationError(
                f"翻转增强每张图最多一次，比例不能超过 100%: {self.fraction:.0%}")
        if self.fraction > self.proposals_per_image:
            raise ValidationError(
                f"增强比例 {self.fraction} 超过每张图的候选数 {self.proposals_per_image}")

    def target_count(self, n: int) -> int:
        return int(np.floor(self.fraction * n + 1e-9))


def _select(pools: List[List[AugmentationLabel]], target: int,
            rng: np.random.Generator) -> List[AugmentationLabel]:
    n = len(pools)
    per_image, extra = divmod(target, n)
    quota = np.full(n, per_image, dtype=np.int64)
    if extra:
        quota[np.sort(rng.choice(n, size=extra, replace=False))] += 1
    selected = []
    for i, pool in enumerate(pools):
        if quota[i] > len(pool):
            raise ValidationError(
                f"图像 {i} 去重后只有 {len(pool)} 个候选，无法满足配额 {quota[i]}")
        selected.extend(pool[:quota[i]])
    return selected


def build_augmented(data: Dataset, plan: AugmentPlan
                    ) -> Tuple[Dataset, List[AugmentationLabel]]:
    """
    生成增强数据集 D ∪ D'

    每张原图采样 proposals_per_image 个候选，按标签去重后子采样：
    |D'| 为 N 的整数倍时每张图配额相同；|D'| < N 时随机选不同原图各增强一次。

    Returns:
        (并集数据集, 增强标签列表)，标签顺序与新增行一致
    """
    geom = data.geometry
    rng = np.random.default_rng(plan.seed)
    target = plan.target_count(data.n)

    pools = []
    for i in range(data.n):
        proposals = [sample_label(plan.strategy, geom, rng, i)
                     for _ in range(plan.proposals_per_image)]
        pools.append(dedup_labels(proposals))
    labels = _select(pools, target, rng) if target else []

    if not labels:
        logger.info(f"{plan.strategy} 增强 {plan.fraction:.0%}: 无新增图像")
        return data, []
    rendered = run_parallel(lambda lb: apply_label(data.images[lb.source_index], lb, geom),
                            labels)
    augmented = Dataset(geom, np.stack(rendered),
                        data.origin[[lb.source_index for lb in labels]])
    union = data.concat(augmented, note=f"augment:{plan.strategy}:{plan.fraction}:{plan.seed}")
    logger.info(f"{plan.strategy} 增强 {plan.fraction:.0%}: 新增 {len(labels)} 张，共 {union.n} 张")
    return union, labels


def write_ledger(path: Union[str, Path], labels: Sequence[AugmentationLabel],
                 offset: int = 0) -> str:
    """标签台账 JSON-lines，output_index 为新增行在并集中的下标"""
    return write_jsonl(path, [lb.to_dict(offset + k) for k, lb in enumerate(labels)])


def ingest_synthetic(data: Dataset, synthetic: Dataset, count: int,
                     synthetic_seeds: Optional[Sequence[int]] = None,
                     evaluation_seeds: Optional[Sequence[int]] = None) -> Dataset:
    """并入外部生成的合成图像前 count 张；生成种子不得与评测种子重叠"""
    if synthetic.geometry != data.geometry:
        raise ValidationError(f"几何不匹配: {synthetic.geometry} vs {data.geometry}")
    if not 0 <= count <= synthetic.n:
        raise ValidationError(f"合成图像数量无效: {count} (可用 {synthetic.n})")
    if synthetic_seeds is not None and evaluation_seeds is not None:
        overlap = sorted(set(synthetic_seeds) & set(evaluation_seeds))
        if overlap:
            raise ValidationError(f"合成数据的种子与评测种子重叠: {overlap[:5]}")
    if count == 0:
        return data
    rows = Dataset(data.geometry, synthetic.images[:count], np.full(count, -1))
    return data.concat(rows, note=f"synthetic:{count}")
