"""FPMC 核心：滤波似然、滤波后验、后验均值与集合聚合"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import config
from .config import WEIGHT_FLUSH
from .core import Dataset, DiffusionSchedule, ImageGeometry, SourceMeasure, check_time, run_parallel
from .errors import CoverageError, NumericalError, ValidationError
from .storage import read_json, read_tensor, save_dataset, tensor_path, write_json, write_tensor

logger = logging.getLogger(__name__)


def as_batch(z: np.ndarray, d: int) -> Tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[-1] != d:
        raise ValidationError(f"输入维度不匹配: 期望 {d}, 实际 {z.shape[-1]}")
    return z, single


def batch_chunk(m: int, width: int) -> int:
    return max(1, int(config.FPMC_CHUNK_ELEMENTS) // max(1, m * width))


def posterior_kernel(Z: np.ndarray, alpha: float, sigma: float, Q: np.ndarray,
                     X: np.ndarray, logw: np.ndarray, R: Optional[np.ndarray] = None,
                     want_weights: bool = False):
    """
    一组共享支撑集的估计器的批量计算

    Args:
        Z: (B, d) 含噪输入
        Q: (L, d) 查询精度
        X: (M, d) 支撑图像
        logw: (M,) 源分布对数权重
        R: 给定时直接返回 sum_l r_l * mu_l，形状 (B, d)
        want_weights: 同时返回后验权重 (L, B, M)

    Returns:
        mu (L, B, d)，或加权和 (B, d)；want_weights 时返回 (mu, P)
    """
    B, d = Z.shape
    L, M = Q.shape[0], X.shape[0]
    scale = -0.5 / (sigma * sigma)
    aX = alpha * X
    out = np.zeros((B, d)) if R is not None else np.empty((L, B, d))
    weights = np.empty((L, B, M)) if want_weights else None

    step = batch_chunk(M, max(d, L))
    for start in range(0, B, step):
        stop = min(B, start + step)
        resid = aX[None, :, :] - Z[start:stop, None, :]
        sq = resid * resid
        # (b*M, d) @ (d, L) -> (L, b, M)
        loglik = (sq.reshape(-1, d) @ Q.T).reshape(stop - start, M, L).transpose(2, 0, 1)
        loglik = loglik * scale + logw[None, None, :]
        peak = loglik.max(axis=-1, keepdims=True)
        if not np.all(np.isfinite(peak)):
            raise NumericalError("后验对数似然全部为 -inf 或出现非有限值")
        P = np.exp(loglik - peak)
        P /= P.sum(axis=-1, keepdims=True)
        P[P < WEIGHT_FLUSH] = 0.0
        mu = P @ X
        if R is not None:
            out[start:stop] = np.einsum("ld,lbd->bd", R, mu)
        else:
            out[:, start:stop] = mu
        if want_weights:
            weights[:, start:stop] = P
    if want_weights:
        return out, weights
    return out


def support_arrays(nu: SourceMeasure) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = nu.support_rows()
    return rows, nu.support_images(rows), np.log(nu.weights[rows])


def _check_q(q: np.ndarray, d: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != d:
        raise ValidationError(f"查询精度维度不匹配: 期望 {d}, 实际 {q.shape[-1]}")
    if np.any(q < 0) or not np.all(np.isfinite(q)):
        raise ValidationError("查询精度必须为非负有限值")
    if not np.all(np.atleast_2d(q).max(axis=-1) > 0):
        raise ValidationError("查询精度至少需要一个正分量")
    return q


def filtered_log_likelihood(z: np.ndarray, x: np.ndarray, q: np.ndarray, t: float,
                            sched: DiffusionSchedule) -> Union[float, np.ndarray]:
    """未归一化的滤波对数似然 (a x - z)^T diag(q) (a x - z) / (-2 sigma^2)"""
    t = check_time(t)
    a, s = sched.alpha(t), sched.sigma(t)
    resid = a * np.asarray(x, dtype=np.float64) - np.asarray(z, dtype=np.float64)
    value = np.sum(np.asarray(q, dtype=np.float64) * resid * resid, axis=-1) / (-2.0 * s * s)
    return float(value) if np.ndim(value) == 0 else value


def filtered_posterior(z: np.ndarray, q: np.ndarray, nu: SourceMeasure, t: float,
                       sched: DiffusionSchedule) -> np.ndarray:
    """源分布有效支撑集上的滤波后验权重；单个 z 返回 (m,)，批量返回 (B, m)"""
    t = check_time(t)
    Z, single = as_batch(z, nu.geometry.d)
    q = _check_q(q, nu.geometry.d)
    _, X, logw = support_arrays(nu)
    _, P = posterior_kernel(Z, sched.alpha(t), sched.sigma(t), q[None, :], X, logw,
                            want_weights=True)
    return P[0, 0] if single else P[0]


def filtered_posterior_mean(z: np.ndarray, t: float, q: np.ndarray, nu: SourceMeasure,
                            sched: DiffusionSchedule) -> np.ndarray:
    """滤波后验均值"""
    t = check_time(t)
    Z, single = as_batch(z, nu.geometry.d)
    q = _check_q(q, nu.geometry.d)
    _, X, logw = support_arrays(nu)
    mu = posterior_kernel(Z, sched.alpha(t), sched.sigma(t), q[None, :], X, logw)
    return mu[0, 0] if single else mu[0]


def score_from_denoiser(z: np.ndarray, denoised: np.ndarray, t: float,
                        sched: DiffusionSchedule) -> np.ndarray:
    """Tweedie 公式：(alpha * D - z) / sigma^2"""
    t = check_time(t)
    a, s = sched.alpha(t), sched.sigma(t)
    return (a * np.asarray(denoised, dtype=np.float64) - np.asarray(z, dtype=np.float64)) / (s * s)


@dataclass(frozen=True, eq=False)
class EstimatorSpec:
    """单个滤波后验均值估计器 (q, r, nu)"""
    q: np.ndarray
    r: np.ndarray
    nu: SourceMeasure

    def __post_init__(self):
        d = self.nu.geometry.d
        q = _check_q(self.q, d).reshape(d)
        r = np.asarray(self.r, dtype=np.float64).reshape(-1)
        if r.shape[0] != d or np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ValidationError("响应权重必须为 d 维非负有限向量")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)


@dataclass(frozen=True, eq=False)
class FpmcStep:
    """单个调度步的估计器集合：Q、R 为 (L, d)，source_index 指向 sources"""
    Q: np.ndarray
    R: np.ndarray
    sources: Tuple[SourceMeasure, ...]
    source_index: Optional[np.ndarray] = None

    def __post_init__(self):
        sources = tuple(self.sources)
        if not sources:
            raise ValidationError("至少需要一个源分布")
        d = sources[0].geometry.d
        if any(s.geometry != sources[0].geometry for s in sources):
            raise ValidationError("所有源分布必须共享同一几何")
        Q = np.array(self.Q, dtype=np.float64, ndmin=2)
        R = np.array(self.R, dtype=np.float64, ndmin=2)
        if Q.shape != R.shape or Q.shape[1] != d:
            raise ValidationError(f"Q/R 形状不匹配: {Q.shape} vs {R.shape}, d={d}")
        _check_q(Q, d)
        if np.any(R < 0) or not np.all(np.isfinite(R)):
            raise ValidationError("响应权重必须为非负有限值")
        if self.source_index is None:
            if len(sources) != 1:
                raise ValidationError("多个源分布时必须给出 source_index")
            index = np.zeros(Q.shape[0], dtype=np.int64)
        else:
            index = np.array(self.source_index, dtype=np.int64).reshape(-1)
        if index.shape[0] != Q.shape[0] or index.min() < 0 or index.max() >= len(sources):
            raise ValidationError("source_index 无效")
        for arr in (Q, R, index):
            arr.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "source_index", index)

    @property
    def size(self) -> int:
        return self.Q.shape[0]

    @property
    def geometry(self) -> ImageGeometry:
        return self.sources[0].geometry

    def groups(self) -> List[Tuple[int, np.ndarray]]:
        """按源分布分组的估计器下标"""
        return [(int(g), np.nonzero(self.source_index == g)[0])
                for g in np.unique(self.source_index)]

    def estimator(self, index: int) -> EstimatorSpec:
        return EstimatorSpec(self.Q[index], self.R[index],
                             self.sources[self.source_index[index]])

    def replace(self, Q: Optional[np.ndarray] = None,
                R: Optional[np.ndarray] = None) -> "FpmcStep":
        return FpmcStep(self.Q if Q is None else Q, self.R if R is None else R,
                        self.sources, self.source_index)


def step_denoise(Z: np.ndarray, t: float, step: FpmcStep, sched: DiffusionSchedule,
                 threads: Optional[int] = None) -> np.ndarray:
    """(sum_l r_l * mu_l) / (sum_l r_l)，批量"""
    t = check_time(t)
    alpha, sigma = sched.alpha(t), sched.sigma(t)

    def work(group):
        g, idx = group
        _, X, logw = support_arrays(step.sources[g])
        return posterior_kernel(Z, alpha, sigma, step.Q[idx], X, logw, R=step.R[idx])

    partials = run_parallel(work, step.groups(), threads)
    numerator = partials[0]
    for part in partials[1:]:
        numerator = numerator + part
    return numerator / step.R.sum(axis=0)


@dataclass(frozen=True, eq=False)
class FpmcModel:
    """按调度步组织的 FPMC 去噪器"""
    schedule: DiffusionSchedule
    steps: Tuple[FpmcStep, ...]
    method: str = "custom"
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        steps = tuple(self.steps)
        if len(steps) != self.schedule.num_steps:
            raise ValidationError(
                f"步数不匹配: 模型 {len(steps)} 步, 调度 {self.schedule.num_steps} 步")
        geometry = steps[0].geometry
        for k, step in enumerate(steps):
            if step.geometry != geometry:
                raise ValidationError(f"第 {k} 步几何不一致")
            coverage = step.R.sum(axis=0)
            holes = np.nonzero(~(coverage > 0))[0]
            if holes.size:
                pixel = geometry.pixel_of(holes[0])
                raise CoverageError(
                    f"覆盖不足: 第 {k} 步 (t={self.schedule.t_grid[k]:.4g}) 像素 {pixel} "
                    f"的响应权重之和为 0", step=k, pixel=pixel)
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def geometry(self) -> ImageGeometry:
        return self.steps[0].geometry

    def estimators(self, step: int) -> List[EstimatorSpec]:
        return [self.steps[step].estimator(i) for i in range(self.steps[step].size)]

    def denoise(self, z: np.ndarray, step: int, threads: Optional[int] = None) -> np.ndarray:
        if not 0 <= step < len(self.steps):
            raise ValidationError(f"调度步越界: {step}")
        Z, single = as_batch(z, self.geometry.d)
        out = step_denoise(Z, self.schedule.t_grid[step], self.steps[step], self.schedule,
                           threads)
        return out[0] if single else out

    def __call__(self, z: np.ndarray, t: float) -> np.ndarray:
        return self.denoise(z, self.schedule.step_index(t))

    def with_step(self, index: int, step: FpmcStep, note: str = "") -> "FpmcModel":
        steps = list(self.steps)
        steps[index] = step
        meta = dict(self.meta)
        if note:
            meta.setdefault("history", []).append(note)
        return FpmcModel(self.schedule, tuple(steps), self.method, meta)


def fpmc_denoise(z: np.ndarray, step: int, model: FpmcModel) -> np.ndarray:
    """FPMC 去噪器在第 step 步的输出"""
    return model.denoise(z, step)


def save_model(model: FpmcModel, directory: Union[str, Path]) -> str:
    """
    保存模型目录：manifest.json + Q/R/源分布权重张量 (f64) + 数据集张量

    Returns:
        manifest 路径
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    g = model.geometry

    dataset_ids: Dict[int, int] = {}
    dataset_entries: List[Dict] = []

    def dataset_ref(dataset: Dataset) -> int:
        key = id(dataset)
        if key not in dataset_ids:
            k = len(dataset_entries)
            name = f"dataset_{k:03d}"
            save_dataset(tensor_path(directory, name), dataset, dtype="f64")
            dataset_ids[key] = k
            dataset_entries.append({"file": f"{name}{config.TENSOR_SUFFIX}", "n": dataset.n})
        return dataset_ids[key]

    step_entries = []
    for k, step in enumerate(model.steps):
        write_tensor(tensor_path(directory, f"step_{k:03d}_q"), step.Q, g.width, g.height,
                     g.channels, "f64")
        write_tensor(tensor_path(directory, f"step_{k:03d}_r"), step.R, g.width, g.height,
                     g.channels, "f64")
        sources = []
        for j, nu in enumerate(step.sources):
            entry = {"dataset": dataset_ref(nu.dataset),
                     "shifts": None if nu.shifts is None else nu.shifts.tolist()}
            uniform = bool(np.all(nu.active)) and np.allclose(nu.weights, 1.0 / nu.size,
                                                              rtol=0, atol=0)
            if uniform:
                entry["weights"] = "uniform"
            else:
                name = f"step_{k:03d}_source_{j:04d}"
                write_tensor(tensor_path(directory, name), nu.weights[:, None], 1, dtype="f64")
                entry["weights"] = f"{name}{config.TENSOR_SUFFIX}"
            sources.append(entry)
        step_entries.append({"L": step.size, "sources": sources,
                             "source_index": step.source_index.tolist()})

    manifest = {
        "format": "fpmc-model",
        "version": 1,
        "method": model.method,
        "geometry": g.to_dict(),
        "schedule": model.schedule.to_dict(),
        "datasets": dataset_entries,
        "steps": step_entries,
        "meta": model.meta,
    }
    path = write_json(directory / "manifest.json", manifest)
    logger.info(f"模型已保存: {directory} ({len(model.steps)} 步)")
    return path


def load_model(directory: Union[str, Path]) -> FpmcModel:
    """读取 save_model 写出的模型目录"""
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    if manifest.get("format") != "fpmc-model":
        raise ValidationError(f"不是 FPMC 模型目录: {directory}")
    geometry = ImageGeometry.from_dict(manifest["geometry"])
    schedule = DiffusionSchedule.from_dict(manifest["schedule"])

    datasets = []
    for entry in manifest["datasets"]:
        data, header = read_tensor(directory / entry["file"])
        datasets.append(Dataset(geometry, data, header.get("origin"),
                                tuple(header.get("provenance", ()))))

    steps = []
    for k, entry in enumerate(manifest["steps"]):
        Q, _ = read_tensor(tensor_path(directory, f"step_{k:03d}_q"))
        R, _ = read_tensor(tensor_path(directory, f"step_{k:03d}_r"))
        sources = []
        for src in entry["sources"]:
            dataset = datasets[src["dataset"]]
            shifts = src.get("shifts")
            if src["weights"] == "uniform":
                if shifts is None:
                    sources.append(SourceMeasure.uniform(dataset))
                else:
                    sources.append(SourceMeasure.translated(dataset, shifts))
            else:
                weights, _ = read_tensor(directory / src["weights"])
                weights = weights.reshape(-1)
                sources.append(SourceMeasure(dataset, weights, weights > 0, shifts))
        steps.append(FpmcStep(Q, R, tuple(sources), entry["source_index"]))
    return FpmcModel(schedule, tuple(steps), manifest.get("method", "custom"),
                     manifest.get("meta", {}))
