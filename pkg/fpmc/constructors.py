"""已有 FPMC 方法的构造：PSPC-Square、PSPC-Flex、LS、ELS、Lukoianov"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .classical import WienerModel, wiener_matrix
from .config import EDM_RHO, EDM_T_MAX, EDM_T_MIN, PRESETS
from .core import Dataset, DiffusionSchedule, ImageGeometry, SourceMeasure, run_parallel
from .errors import ValidationError
from .estimator import FpmcModel, FpmcStep
from .storage import read_json, read_tensor, tensor_path, write_json, write_tensor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ScheduleEntry:
    step: int
    t: float
    s: Optional[int] = None
    tau: Optional[float] = None

    def to_dict(self) -> Dict:
        data = {"step": self.step, "t": self.t}
        if self.s is not None:
            data["s"] = self.s
        if self.tau is not None:
            data["tau"] = self.tau
        return data


@dataclass(frozen=True)
class ScheduleTable:
    """每个调度步的超参数：块大小 s(t) 或阈值 tau(t)"""
    entries: Tuple[ScheduleEntry, ...]

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=lambda e: e.step))
        if not entries:
            raise ValidationError("超参数表为空")
        if [e.step for e in entries] != list(range(len(entries))):
            raise ValidationError("超参数表的步序号必须为 0..M-1")
        for e in entries:
            if (e.s is None) == (e.tau is None):
                raise ValidationError(f"第 {e.step} 步必须且只能给出 s 或 tau 之一")
            if e.s is not None and (int(e.s) != e.s or e.s < 1):
                raise ValidationError(f"第 {e.step} 步块大小无效: {e.s}")
            if e.tau is not None and not (0 < e.tau <= 1):
                raise ValidationError(f"第 {e.step} 步阈值必须在 (0, 1]: {e.tau}")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def times(self) -> List[float]:
        return [e.t for e in self.entries]

    def schedule(self, kind: str = "edm") -> DiffusionSchedule:
        return DiffusionSchedule.from_times(self.times, kind=kind)

    def sizes(self) -> List[int]:
        if any(e.s is None for e in self.entries):
            raise ValidationError("超参数表不是块大小表")
        return [int(e.s) for e in self.entries]

    def taus(self) -> List[float]:
        if any(e.tau is None for e in self.entries):
            raise ValidationError("超参数表不是阈值表")
        return [float(e.tau) for e in self.entries]

    @classmethod
    def from_sizes(cls, times: Sequence[float], sizes: Sequence[int]) -> "ScheduleTable":
        if len(times) != len(sizes):
            raise ValidationError(f"时间与块大小数量不一致: {len(times)} vs {len(sizes)}")
        return cls(tuple(ScheduleEntry(k, float(t), s=int(s))
                         for k, (t, s) in enumerate(zip(times, sizes))))

    @classmethod
    def from_taus(cls, times: Sequence[float], taus: Union[float, Sequence[float]]
                  ) -> "ScheduleTable":
        if np.isscalar(taus):
            taus = [float(taus)] * len(times)
        if len(times) != len(taus):
            raise ValidationError(f"时间与阈值数量不一致: {len(times)} vs {len(taus)}")
        return cls(tuple(ScheduleEntry(k, float(t), tau=float(v))
                         for k, (t, v) in enumerate(zip(times, taus))))

    @classmethod
    def from_preset(cls, name: str, method: str, t_min: float = EDM_T_MIN,
                    t_max: float = EDM_T_MAX, rho: float = EDM_RHO) -> "ScheduleTable":
        """从数据集预设构造，例如 ("cifar10", "pspc-square")"""
        if name not in PRESETS:
            raise ValidationError(f"未知预设: {name}，可选 {sorted(PRESETS)}")
        preset = PRESETS[name]
        if method not in preset:
            raise ValidationError(f"预设 {name} 没有方法 {method} 的超参数")
        times = DiffusionSchedule.edm(preset["num_steps"], t_min, t_max, rho).t_grid
        values = preset[method]
        if method in ("pspc-flex", "lukoianov"):
            return cls.from_taus(times, values)
        return cls.from_sizes(times, values)

    def to_list(self) -> List[Dict]:
        return [e.to_dict() for e in self.entries]

    @classmethod
    def from_list(cls, rows: Sequence[Dict]) -> "ScheduleTable":
        return cls(tuple(ScheduleEntry(int(r["step"]), float(r["t"]),
                                       s=None if r.get("s") is None else int(r["s"]),
                                       tau=None if r.get("tau") is None else float(r["tau"]))
                         for r in rows))

    def save(self, path: PathLike) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_list(), indent=2), encoding="utf-8")
        return str(path)

    @classmethod
    def load(cls, path: PathLike) -> "ScheduleTable":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"超参数表不存在: {path}")
        return cls.from_list(json.loads(path.read_text(encoding="utf-8")))


def square_patch_indicator(x: int, y: int, s: int, geom: ImageGeometry) -> np.ndarray:
    """以 (x, y) 为中心、边长 s（奇数）的方块指示向量，裁剪到图像内，覆盖全部通道"""
    if int(s) != s or s < 1 or s % 2 == 0:
        raise ValidationError(f"块大小必须为正奇数: {s}")
    if not (0 <= x < geom.width and 0 <= y < geom.height):
        raise ValidationError(f"块中心越界: ({x}, {y})")
    k = s // 2
    mask = np.zeros((geom.height, geom.width))
    mask[max(0, y - k):y + k + 1, max(0, x - k):x + k + 1] = 1.0
    return geom.expand_pixels(mask)


def corner_patch_indicator(x0: int, y0: int, sx: int, sy: int,
                           geom: ImageGeometry) -> np.ndarray:
    """左上角为 (x0, y0)、大小 sx x sy 的矩形块（必须完全在图像内）"""
    if x0 < 0 or y0 < 0 or x0 + sx > geom.width or y0 + sy > geom.height or sx < 1 or sy < 1:
        raise ValidationError(f"矩形块越界: ({x0}, {y0}) 大小 {sx}x{sy}")
    mask = np.zeros((geom.height, geom.width))
    mask[y0:y0 + sy, x0:x0 + sx] = 1.0
    return geom.expand_pixels(mask)


def interior_centers(s: int, geom: ImageGeometry) -> List[Tuple[int, int]]:
    """完整 s x s 块的合法中心；s 为 0 或 1 时为全部像素"""
    if s > min(geom.width, geom.height):
        raise ValidationError(f"块大小 {s} 超过图像尺寸 {geom.width}x{geom.height}")
    if s <= 1:
        return geom.pixels()
    k = s // 2
    return [(x, y) for y in range(k, geom.height - k) for x in range(k, geom.width - k)]


def pspc_square_masks(s: int, geom: ImageGeometry) -> np.ndarray:
    """PSPC-Square 的块集合 (L, d)；偶数边长用左上角裁剪集合，超出图像时截断"""
    sx, sy = min(s, geom.width), min(s, geom.height)
    if sx == sy and sx % 2 == 1:
        return np.stack([square_patch_indicator(x, y, sx, geom)
                         for x, y in interior_centers(sx, geom)])
    return np.stack([corner_patch_indicator(x0, y0, sx, sy, geom)
                     for y0 in range(geom.height - sy + 1)
                     for x0 in range(geom.width - sx + 1)])


def pixel_response(x: int, y: int, geom: ImageGeometry) -> np.ndarray:
    """单像素 (全部通道) 指示向量 p(x, y, 1)"""
    return square_patch_indicator(x, y, 1, geom)


def _require_odd(table: ScheduleTable) -> List[int]:
    sizes = table.sizes()
    even = [k for k, s in enumerate(sizes) if s % 2 == 0]
    if even:
        raise ValidationError(f"LS/ELS 块大小必须为奇数，第 {even[0]} 步为 {sizes[even[0]]}")
    return sizes


def _log_build(method: str, model: FpmcModel):
    sizes = [step.size for step in model.steps]
    logger.info(f"构造 {method} 完成: {len(sizes)} 步, 估计器数量 {min(sizes)}-{max(sizes)}")


def build_pspc_square(s_table: ScheduleTable, data: Dataset) -> FpmcModel:
    """Q = R = 方块指示向量，V = 均匀分布"""
    geom = data.geometry
    source = SourceMeasure.uniform(data)

    def build_step(s):
        masks = pspc_square_masks(s, geom)
        return FpmcStep(masks, masks, (source,))

    steps = run_parallel(build_step, s_table.sizes())
    model = FpmcModel(s_table.schedule(), tuple(steps), "pspc-square",
                      {"table": s_table.to_list()})
    _log_build("pspc-square", model)
    return model


def _local_masks(s: int, geom: ImageGeometry) -> Tuple[np.ndarray, np.ndarray]:
    Q = np.stack([square_patch_indicator(x, y, s, geom) for x, y in geom.pixels()])
    R = np.stack([pixel_response(x, y, geom) for x, y in geom.pixels()])
    return Q, R


def build_ls(s_table: ScheduleTable, data: Dataset) -> FpmcModel:
    """每个像素一个裁剪方块查询，响应为该像素本身"""
    geom = data.geometry
    source = SourceMeasure.uniform(data)

    def build_step(s):
        Q, R = _local_masks(s, geom)
        return FpmcStep(Q, R, (source,))

    steps = run_parallel(build_step, _require_odd(s_table))
    model = FpmcModel(s_table.schedule(), tuple(steps), "ls", {"table": s_table.to_list()})
    _log_build("ls", model)
    return model


def translation_set(x: int, y: int, s: int, geom: ImageGeometry) -> List[Tuple[int, int]]:
    """
    ELS 在像素 (x, y) 处的合法平移集合

    中心像素 (k <= x < W-k 且 k <= y < H-k) 允许两个方向平移；
    水平或垂直边带只沿未被裁剪的方向平移；角落只有 T_00。
    """
    k = s // 2
    xs = list(range(k - x, geom.width - k - x)) if k <= x < geom.width - k else [0]
    ys = list(range(k - y, geom.height - k - y)) if k <= y < geom.height - k else [0]
    return [(i, j) for j in ys for i in xs]


def build_els(s_table: ScheduleTable, data: Dataset) -> FpmcModel:
    """Q、R 同 LS；每个像素的源分布为平移数据集上的均匀分布"""
    geom = data.geometry
    uniform = SourceMeasure.uniform(data)

    def build_step(s):
        Q, R = _local_masks(s, geom)
        sources: List[SourceMeasure] = []
        lookup: Dict[Tuple[Tuple[int, int], ...], int] = {}
        index = []
        for x, y in geom.pixels():
            key = tuple(translation_set(x, y, s, geom))
            if key not in lookup:
                lookup[key] = len(sources)
                sources.append(uniform if key == ((0, 0),) else
                               SourceMeasure.translated(data, key))
            index.append(lookup[key])
        return FpmcStep(Q, R, tuple(sources), index)

    steps = run_parallel(build_step, _require_odd(s_table))
    model = FpmcModel(s_table.schedule(), tuple(steps), "els", {"table": s_table.to_list()})
    _log_build("els", model)
    return model


def cumulative_threshold_mask(saliency: np.ndarray, tau: float, geom: ImageGeometry) -> np.ndarray:
    """
    累积阈值掩码：按值降序（相同值按下标升序）选取像素，
    直到累积和达到 tau * 总和，返回覆盖全部通道的指示向量
    """
    if not (0 < tau <= 1):
        raise ValidationError(f"阈值必须在 (0, 1]: {tau}")
    saliency = np.asarray(saliency, dtype=np.float64).reshape(-1)
    if saliency.shape[0] != geom.d:
        raise ValidationError(f"敏感度图维度不匹配: {saliency.shape[0]} vs {geom.d}")
    if np.any(saliency < 0):
        raise ValidationError("敏感度图必须非负")
    per_pixel = geom.unflatten(saliency).mean(axis=-1).reshape(-1)
    total = per_pixel.sum()
    if total <= 0:
        raise ValidationError("敏感度图全为 0")

    if tau >= 1:
        selected = per_pixel > 0
    else:
        order = np.argsort(-per_pixel, kind="stable")
        cumulative = np.cumsum(per_pixel[order])
        count = int(np.searchsorted(cumulative, tau * total * (1 - 1e-12), side="left")) + 1
        selected = np.zeros(per_pixel.shape[0], dtype=bool)
        selected[order[:count]] = True
    return geom.expand_pixels(selected.astype(np.float64))


@dataclass(frozen=True, eq=False)
class SensitivityMap:
    """每步每个输出像素一张 d 维敏感度图，values 形状 (steps, H*W, d)"""
    geometry: ImageGeometry
    values: np.ndarray

    def __post_init__(self):
        g = self.geometry
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[1:] != (g.width * g.height, g.d):
            raise ValidationError(
                f"敏感度图形状应为 (steps, {g.width * g.height}, {g.d})，实际 {values.shape}")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValidationError("敏感度图必须为非负有限值")
        object.__setattr__(self, "values", values)

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    def save(self, directory: PathLike) -> str:
        directory = Path(directory)
        g = self.geometry
        write_tensor(tensor_path(directory, "maps"), self.values.reshape(-1, g.d),
                     g.width, g.height, g.channels)
        return write_json(directory / "manifest.json",
                          {"format": "fpmc-sensitivity", "geometry": g.to_dict(),
                           "steps": self.num_steps})

    @classmethod
    def load(cls, directory: PathLike) -> "SensitivityMap":
        directory = Path(directory)
        manifest = read_json(directory / "manifest.json")
        geometry = ImageGeometry.from_dict(manifest["geometry"])
        data, _ = read_tensor(tensor_path(directory, "maps"))
        steps = int(manifest["steps"])
        return cls(geometry, data.reshape(steps, geometry.width * geometry.height, geometry.d))


def gaussian_bump_maps(geom: ImageGeometry, times: Sequence[float]) -> SensitivityMap:
    """合成敏感度图：以每个像素为中心的各向同性高斯，宽度随 t 增大"""
    ys, xs = np.mgrid[0:geom.height, 0:geom.width]
    maps = np.empty((len(times), geom.width * geom.height, geom.d))
    for k, t in enumerate(times):
        width = 0.5 + float(t) * max(geom.width, geom.height) / 4.0
        for p, (x, y) in enumerate(geom.pixels()):
            bump = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * width * width))
            maps[k, p] = geom.expand_pixels(bump)
    return SensitivityMap(geom, maps)


def build_pspc_flex(maps: SensitivityMap, tau_table: ScheduleTable, data: Dataset) -> FpmcModel:
    """Q = R = 敏感度图的累积阈值掩码，V = 均匀分布"""
    geom = data.geometry
    if maps.geometry != geom:
        raise ValidationError(f"敏感度图几何不匹配: {maps.geometry} vs {geom}")
    if maps.num_steps != len(tau_table):
        raise ValidationError(f"敏感度图步数 {maps.num_steps} 与阈值表 {len(tau_table)} 不一致")
    source = SourceMeasure.uniform(data)
    taus = tau_table.taus()

    def build_step(k):
        masks = np.stack([cumulative_threshold_mask(maps.values[k, p], taus[k], geom)
                          for p in range(geom.width * geom.height)])
        missing = [[x, y] for p, (x, y) in enumerate(geom.pixels())
                   if masks[p, geom.flat_index(x, y)] == 0]
        if missing:
            logger.warning(f"PSPC-Flex 第 {k} 步有 {len(missing)} 个像素的掩码不包含自身")
        return FpmcStep(masks, masks, (source,)), missing

    built = run_parallel(build_step, range(len(tau_table)))
    meta = {"table": tau_table.to_list()}
    excluded = [{"step": k, "pixels": missing} for k, (_, missing) in enumerate(built) if missing]
    if excluded:
        meta["self_exclusion"] = excluded
    model = FpmcModel(tau_table.schedule(), tuple(step for step, _ in built), "pspc-flex", meta)
    _log_build("pspc-flex", model)
    return model


def lukoianov_masks(wiener: WienerModel, tau: float, t: float,
                    sched: DiffusionSchedule) -> np.ndarray:
    """Wiener 矩阵逐行除以行最大值后按 tau 阈值化；行最大值非正时退化为 e_l"""
    W = wiener_matrix(wiener, t, sched)
    row_max = W.max(axis=1)
    degenerate = ~(row_max > 0)
    scaled = W / np.where(degenerate, 1.0, row_max)[:, None]
    Q = (scaled > tau).astype(np.float64)
    if np.any(degenerate):
        logger.info(f"t={t:.4g}: {int(degenerate.sum())} 行退化为单位向量")
        Q[degenerate] = np.eye(wiener.d)[degenerate]
    return Q


def build_lukoianov(wiener: WienerModel, tau: float, data: Dataset,
                    sched: DiffusionSchedule) -> FpmcModel:
    """每个输出维度一个估计器：q_l 为阈值化 Wiener 行，r_l = e_l"""
    if not (0 < tau < 1):
        raise ValidationError(f"Lukoianov 阈值必须在 (0, 1): {tau}")
    if wiener.d != data.d:
        raise ValidationError(f"Wiener 模型维度 {wiener.d} 与数据集 {data.d} 不一致")
    source = SourceMeasure.uniform(data)
    R = np.eye(data.d)

    def build_step(t):
        Q = lukoianov_masks(wiener, tau, t, sched)
        outside = [int(i) for i in np.flatnonzero(np.diag(Q) == 0)]
        if outside:
            logger.warning(f"Lukoianov t={t:.4g}: {len(outside)} 个维度的掩码不包含自身")
        return FpmcStep(Q, R, (source,)), outside

    built = run_parallel(build_step, list(sched.t_grid))
    meta = {"tau": float(tau)}
    excluded = [{"step": k, "dims": outside} for k, (_, outside) in enumerate(built) if outside]
    if excluded:
        meta["self_exclusion"] = excluded
    model = FpmcModel(sched, tuple(step for step, _ in built), "lukoianov", meta)
    _log_build("lukoianov", model)
    return model


def build_optimal(data: Dataset, sched: DiffusionSchedule) -> FpmcModel:
    """单估计器 q = r = 1 的 FPMC，与最优去噪器一致"""
    ones = np.ones((1, data.d))
    step = FpmcStep(ones, ones, (SourceMeasure.uniform(data),))
    return FpmcModel(sched, tuple([step] * sched.num_steps), "optimal")
