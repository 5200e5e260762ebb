"""核心类型：图像几何、数据集、扩散调度与源分布"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import EDM_RHO, EDM_T_MAX, EDM_T_MIN, get_threads
from .errors import ValidationError

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("edm", "vp")


@dataclass(frozen=True)
class ImageGeometry:
    """图像几何：宽、高、通道数；展平顺序固定为 (y, x, c) 行优先"""
    width: int
    height: int
    channels: int = 1

    def __post_init__(self):
        for name in ("width", "height", "channels"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValidationError(f"图像几何参数无效: {name}={value}")

    @property
    def d(self) -> int:
        return self.width * self.height * self.channels

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def flat_index(self, x: int, y: int, c: int = 0) -> int:
        if not (0 <= x < self.width and 0 <= y < self.height and 0 <= c < self.channels):
            raise ValidationError(f"像素坐标越界: ({x}, {y}, {c})")
        return (y * self.width + x) * self.channels + c

    def pixel_of(self, index: int) -> Tuple[int, int]:
        """展平下标 -> (x, y)"""
        pixel = int(index) // self.channels
        return pixel % self.width, pixel // self.width

    def pixels(self) -> List[Tuple[int, int]]:
        """按展平顺序列出所有像素 (x, y)"""
        return [(x, y) for y in range(self.height) for x in range(self.width)]

    def flatten(self, img: np.ndarray) -> np.ndarray:
        """(..., H, W, C) 或单通道 (..., H, W) -> (..., d)"""
        img = np.asarray(img)
        if self.channels == 1 and img.shape[-2:] == (self.height, self.width):
            img = img[..., None]
        if img.shape[-3:] != self.shape:
            raise ValidationError(f"图像尺寸不匹配: 期望 {self.shape}, 实际 {img.shape}")
        return img.reshape(img.shape[:-3] + (self.d,))

    def unflatten(self, vec: np.ndarray) -> np.ndarray:
        """(..., d) -> (..., H, W, C)"""
        vec = np.asarray(vec)
        if vec.shape[-1] != self.d:
            raise ValidationError(f"向量维度不匹配: 期望 {self.d}, 实际 {vec.shape[-1]}")
        return vec.reshape(vec.shape[:-1] + self.shape)

    def expand_pixels(self, pixel_mask: np.ndarray) -> np.ndarray:
        """(H, W) 像素掩码扩展到全部通道 -> (d,)"""
        pixel_mask = np.asarray(pixel_mask).reshape(self.height, self.width)
        return np.repeat(pixel_mask[..., None], self.channels, axis=-1).reshape(self.d)

    def to_dict(self) -> Dict:
        return {"width": self.width, "height": self.height, "channels": self.channels}

    @classmethod
    def from_dict(cls, data: Dict) -> "ImageGeometry":
        return cls(int(data["width"]), int(data["height"]), int(data.get("channels", 1)))


@dataclass(frozen=True, eq=False)
class Dataset:
    """N 张展平图像，取值范围 [-1, 1]"""
    geometry: ImageGeometry
    images: np.ndarray
    origin: Optional[np.ndarray] = None
    provenance: Tuple[str, ...] = ()

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64, copy=True)
        if images.ndim == 1:
            images = images[None, :]
        if images.ndim != 2 or images.shape[1] != self.geometry.d:
            raise ValidationError(
                f"数据集维度不匹配: 期望 (N, {self.geometry.d}), 实际 {np.shape(self.images)}")
        if images.shape[0] < 1:
            raise ValidationError("数据集为空 (empty dataset)")
        if not np.all(np.isfinite(images)):
            raise ValidationError("数据集包含非有限值")
        if images.min() < -1.0 - 1e-9 or images.max() > 1.0 + 1e-9:
            raise ValidationError(
                f"像素值超出 [-1, 1]: [{images.min():.6f}, {images.max():.6f}]")
        images = np.clip(images, -1.0, 1.0)
        images.setflags(write=False)

        if self.origin is None:
            origin = np.arange(images.shape[0], dtype=np.int64)
        else:
            origin = np.array(self.origin, dtype=np.int64).reshape(-1)
            if origin.shape[0] != images.shape[0]:
                raise ValidationError("origin 长度与图像数量不一致")
        origin.setflags(write=False)

        object.__setattr__(self, "images", images)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "provenance", tuple(self.provenance))

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def d(self) -> int:
        return self.geometry.d

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.geometry, self.images[indices], self.origin[indices], self.provenance)

    def concat(self, other: "Dataset", note: str = "") -> "Dataset":
        """拼接两个同几何数据集"""
        if other.geometry != self.geometry:
            raise ValidationError(f"几何不匹配: {self.geometry} vs {other.geometry}")
        provenance = self.provenance + ((note,) if note else ())
        return Dataset(self.geometry,
                       np.concatenate([self.images, other.images]),
                       np.concatenate([self.origin, other.origin]),
                       provenance)


def check_time(t: float) -> float:
    t = float(t)
    if not np.isfinite(t) or t <= 0:
        raise ValidationError(f"时间 t 必须为正数: {t}")
    return t


def edm_time_grid(num_steps: int, t_min: float = EDM_T_MIN, t_max: float = EDM_T_MAX,
                  rho: float = EDM_RHO) -> np.ndarray:
    """EDM rho 插值时间网格，严格递减"""
    if int(num_steps) != num_steps or num_steps < 2:
        raise ValidationError(f"num_steps 至少为 2: {num_steps}")
    if not (0 < t_min < t_max) or rho <= 0:
        raise ValidationError(f"时间网格参数无效: t_min={t_min}, t_max={t_max}, rho={rho}")
    i = np.arange(num_steps, dtype=np.float64)
    inv_rho = 1.0 / rho
    hi, lo = t_max ** inv_rho, t_min ** inv_rho
    grid = (hi + i / (num_steps - 1) * (lo - hi)) ** rho
    # 端点精确
    grid[0], grid[-1] = t_max, t_min
    return grid


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """扩散调度：alpha(t)、sigma(t) 与递减时间网格"""
    t_grid: np.ndarray
    kind: str = "edm"
    t_max: Optional[float] = None

    def __post_init__(self):
        grid = np.array(self.t_grid, dtype=np.float64).reshape(-1)
        if grid.size < 1:
            raise ValidationError("时间网格为空")
        if np.any(grid <= 0) or np.any(np.diff(grid) >= 0):
            raise ValidationError("时间网格必须为正且严格递减")
        if self.kind not in SCHEDULE_KINDS:
            raise ValidationError(f"未知调度类型: {self.kind}")
        t_max = float(grid[0]) if self.t_max is None else float(self.t_max)
        if not np.isclose(t_max, grid[0], rtol=1e-12, atol=0.0):
            raise ValidationError(f"t_grid[0] 必须等于 t_max: {grid[0]} vs {t_max}")
        grid.setflags(write=False)
        object.__setattr__(self, "t_grid", grid)
        object.__setattr__(self, "t_max", t_max)

    @classmethod
    def edm(cls, num_steps: int = 18, t_min: float = EDM_T_MIN, t_max: float = EDM_T_MAX,
            rho: float = EDM_RHO, kind: str = "edm") -> "DiffusionSchedule":
        return cls(edm_time_grid(num_steps, t_min, t_max, rho), kind=kind)

    @classmethod
    def from_times(cls, times: Iterable[float], kind: str = "edm") -> "DiffusionSchedule":
        return cls(np.asarray(list(times), dtype=np.float64), kind=kind)

    @property
    def num_steps(self) -> int:
        return int(self.t_grid.size)

    def alpha(self, t: float) -> float:
        t = check_time(t)
        if self.kind == "vp":
            return 1.0 / np.sqrt(1.0 + t * t)
        return 1.0

    def sigma(self, t: float) -> float:
        t = check_time(t)
        if self.kind == "vp":
            return t / np.sqrt(1.0 + t * t)
        return t

    def step_index(self, t: float) -> int:
        """网格时间 -> 步序号"""
        matches = np.nonzero(np.isclose(self.t_grid, float(t), rtol=1e-9, atol=0.0))[0]
        if matches.size == 0:
            raise ValidationError(f"t={t} 不在时间网格中")
        return int(matches[0])

    def to_dict(self) -> Dict:
        return {"kind": self.kind, "t_max": self.t_max, "t_grid": [float(t) for t in self.t_grid]}

    @classmethod
    def from_dict(cls, data: Dict) -> "DiffusionSchedule":
        return cls(np.asarray(data["t_grid"], dtype=np.float64), kind=data.get("kind", "edm"),
                   t_max=data.get("t_max"))


def translate_image(img: np.ndarray, i: int, j: int, geometry: ImageGeometry) -> np.ndarray:
    """零填充整数平移: T_ij x(a, b) = x(a + i, b + j)，支持批量 (..., d)"""
    grid = geometry.unflatten(img)
    out = np.zeros_like(grid)
    h, w = geometry.height, geometry.width
    ys, ye = max(0, -j), min(h, h - j)
    xs, xe = max(0, -i), min(w, w - i)
    if ys < ye and xs < xe:
        out[..., ys:ye, xs:xe, :] = grid[..., ys + j:ye + j, xs + i:xe + i, :]
    return geometry.flatten(out)


@dataclass(frozen=True, eq=False)
class SourceMeasure:
    """数据集上的离散源分布；shifts 非空时支撑集为各图像的平移副本"""
    dataset: Dataset
    weights: np.ndarray
    active: Optional[np.ndarray] = None
    shifts: Optional[np.ndarray] = None

    def __post_init__(self):
        shifts = None
        if self.shifts is not None:
            shifts = np.array(self.shifts, dtype=np.int64).reshape(-1, 2)
            if shifts.shape[0] < 1:
                raise ValidationError("平移集合为空")
            shifts.setflags(write=False)
        size = self.dataset.n * (1 if shifts is None else shifts.shape[0])

        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        if weights.shape[0] != size:
            raise ValidationError(f"源分布权重长度不匹配: 期望 {size}, 实际 {weights.shape[0]}")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValidationError("源分布权重必须为非负有限值")
        active = np.ones(size, dtype=bool) if self.active is None else \
            np.array(self.active, dtype=bool).reshape(-1)
        if active.shape[0] != size:
            raise ValidationError("active 掩码长度不匹配")

        effective = np.where(active, weights, 0.0)
        total = effective.sum()
        if total <= 0:
            raise ValidationError("源分布没有正权重的有效图像 (empty support)")
        effective = effective / total
        effective.setflags(write=False)
        active.setflags(write=False)
        object.__setattr__(self, "weights", effective)
        object.__setattr__(self, "active", active)
        object.__setattr__(self, "shifts", shifts)

    @classmethod
    def uniform(cls, dataset: Dataset) -> "SourceMeasure":
        return cls(dataset, np.full(dataset.n, 1.0 / dataset.n))

    @classmethod
    def translated(cls, dataset: Dataset, shifts: Sequence[Tuple[int, int]]) -> "SourceMeasure":
        """数据集所有图像在 shifts 下的零填充平移，均匀权重"""
        shifts = np.asarray(shifts, dtype=np.int64).reshape(-1, 2)
        size = dataset.n * shifts.shape[0]
        return cls(dataset, np.full(size, 1.0 / size), shifts=shifts)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def geometry(self) -> ImageGeometry:
        return self.dataset.geometry

    @property
    def num_shifts(self) -> int:
        return 1 if self.shifts is None else self.shifts.shape[0]

    def support_rows(self) -> np.ndarray:
        """有效且权重为正的支撑点下标"""
        return np.nonzero(self.active & (self.weights > 0))[0]

    def origin(self) -> np.ndarray:
        """每个支撑点对应的训练图像下标"""
        return np.repeat(self.dataset.origin, self.num_shifts)

    def support_images(self, rows: Optional[np.ndarray] = None) -> np.ndarray:
        """取出支撑点图像 (m, d)；平移支撑集按需生成"""
        if rows is None:
            rows = self.support_rows()
        rows = np.asarray(rows, dtype=np.int64)
        if self.shifts is None:
            return self.dataset.images[rows]
        per_image = self.num_shifts
        out = np.empty((rows.size, self.dataset.d), dtype=np.float64)
        shift_ids = rows % per_image
        for s in np.unique(shift_ids):
            sel = np.nonzero(shift_ids == s)[0]
            i, j = self.shifts[s]
            out[sel] = translate_image(self.dataset.images[rows[sel] // per_image],
                                       int(i), int(j), self.dataset.geometry)
        return out

    def with_active(self, active: np.ndarray) -> "SourceMeasure":
        """替换 active 掩码并重新归一化；原对象不变"""
        base = np.where(self.active, self.weights, 0.0)
        return SourceMeasure(self.dataset, base, np.asarray(active, dtype=bool), self.shifts)


def run_parallel(func: Callable, items: Sequence, threads: Optional[int] = None) -> List:
    """线程池并行执行，结果顺序与输入一致"""
    items = list(items)
    workers = min(get_threads(threads), max(1, len(items)))
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
