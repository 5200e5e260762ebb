"""定量比较：样本 MSE / r² 及标准误、按 t 的去噪误差扫描、相对误差变化"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .core import Dataset, DiffusionSchedule, check_time
from .errors import ValidationError
from .storage import write_json

logger = logging.getLogger(__name__)

R2_CONVENTION = "per-sample-centered/v1"

Denoiser = Callable[[np.ndarray, float], np.ndarray]


def standard_error(values: np.ndarray) -> float:
    """std(ddof=1) / sqrt(n)，n < 2 时为 NaN"""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return float("nan")
    return float(np.std(values, ddof=1) / np.sqrt(values.size))


@dataclass
class SimilarityStats:
    """一个去噪器相对参考样本的统计"""
    mse_mean: float
    mse_se: float
    r2_mean: float
    r2_se: float
    n: int
    excluded: int = 0

    def to_dict(self) -> Dict:
        return {"mse_mean": self.mse_mean, "mse_se": self.mse_se, "r2_mean": self.r2_mean,
                "r2_se": self.r2_se, "n": self.n, "excluded": self.excluded}


def sample_similarity(a: np.ndarray, b: np.ndarray) -> SimilarityStats:
    """
    成对样本比较，b 为参考

    每对样本：mse_i 为按维平均的平方差；
    r²_i = 1 - Σ(a-b)² / Σ(b - mean(b))²，参考样本方差为 0 时 r² 无定义，剔除并计数。
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[None, :], b.reshape(1, -1)
    if a.shape != b.shape:
        raise ValidationError(f"样本数量或维度不匹配: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        raise ValidationError("没有可比较的样本")

    sq = np.sum((a - b) ** 2, axis=1)
    mse = sq / a.shape[1]
    denom = np.sum((b - b.mean(axis=1, keepdims=True)) ** 2, axis=1)
    valid = denom > 0
    excluded = int(np.sum(~valid))
    if excluded:
        logger.warning(f"{excluded} 个参考样本方差为 0，r² 中已剔除")
    r2 = 1.0 - sq[valid] / denom[valid]
    return SimilarityStats(
        mse_mean=float(mse.mean()), mse_se=standard_error(mse),
        r2_mean=float(r2.mean()) if r2.size else float("nan"), r2_se=standard_error(r2),
        n=int(a.shape[0]), excluded=excluded)


@dataclass
class ComparisonReport:
    """多个去噪器的样本与同一参考的比较"""
    reference: str
    rows: Dict[str, SimilarityStats] = field(default_factory=dict)
    r2_convention: str = R2_CONVENTION

    def to_dict(self) -> Dict:
        return {"reference": self.reference, "r2_convention": self.r2_convention,
                "rows": {name: stats.to_dict() for name, stats in self.rows.items()}}

    def to_text(self) -> str:
        name_width = max([len("denoiser")] + [len(name) for name in self.rows])
        header = (f"{'denoiser':<{name_width}}  {'MSE':>10}  {'±SE':>10}  "
                  f"{'r2':>8}  {'±SE':>8}  {'n':>6}")
        lines = [f"参考: {self.reference}", header, "-" * len(header)]
        for name, s in self.rows.items():
            lines.append(f"{name:<{name_width}}  {s.mse_mean:>10.5f}  {s.mse_se:>10.5f}  "
                         f"{s.r2_mean:>8.4f}  {s.r2_se:>8.4f}  {s.n:>6d}")
        return "\n".join(lines)

    def save(self, directory: Union[str, Path]) -> str:
        directory = Path(directory)
        path = write_json(directory / "comparison.json", self.to_dict())
        (directory / "comparison.txt").write_text(self.to_text() + "\n", encoding="utf-8")
        return path


def compare_samples(samples: Dict[str, np.ndarray], reference: np.ndarray,
                    reference_name: str = "reference") -> ComparisonReport:
    report = ComparisonReport(reference_name)
    for name, batch in samples.items():
        report.rows[name] = sample_similarity(batch, reference)
        logger.info(f"{name}: MSE {report.rows[name].mse_mean:.5f}, r² {report.rows[name].r2_mean:.4f}")
    return report


@dataclass
class SweepResult:
    """按 t 的去噪误差 (mse ± se)"""
    t: np.ndarray
    mse: np.ndarray
    stderr: np.ndarray
    n_per_t: int

    def to_dict(self) -> Dict:
        return {"n_per_t": self.n_per_t,
                "rows": [{"t": float(t), "mse": float(m), "stderr": float(s)}
                         for t, m, s in zip(self.t, self.mse, self.stderr)]}

    @classmethod
    def from_dict(cls, data: Dict) -> "SweepResult":
        rows = data["rows"]
        return cls(np.array([r["t"] for r in rows]), np.array([r["mse"] for r in rows]),
                   np.array([r["stderr"] for r in rows]), int(data["n_per_t"]))

    def write_csv(self, path: Union[str, Path]) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["t", "mse", "stderr", "n"])
            for t, m, s in zip(self.t, self.mse, self.stderr):
                writer.writerow([repr(float(t)), repr(float(m)), repr(float(s)), self.n_per_t])
        return str(path)


def denoiser_error_sweep(denoiser: Denoiser, target: Denoiser, data: Dataset,
                         t_list: Sequence[float], n_per_t: int, seed: int,
                         sched: DiffusionSchedule, batch_size: Optional[int] = None
                         ) -> SweepResult:
    """
    每个 t 用种子 [seed, i] 抽取 x 与噪声，形成 z = alpha x + sigma eps，
    比较两个去噪器输出的按维平均平方差。结果与 batch_size 无关。
    """
    if n_per_t < 1:
        raise ValidationError(f"n_per_t 必须 >= 1: {n_per_t}")
    times = [check_time(t) for t in t_list]
    batch_size = batch_size or n_per_t
    mse, se = [], []
    for i, t in enumerate(times):
        rng = np.random.default_rng([seed, i])
        rows = rng.integers(0, data.n, size=n_per_t)
        eps = rng.standard_normal((n_per_t, data.d))
        z = sched.alpha(t) * data.images[rows] + sched.sigma(t) * eps
        errors = np.empty(n_per_t)
        for start in range(0, n_per_t, batch_size):
            chunk = z[start:start + batch_size]
            diff = denoiser(chunk, t) - target(chunk, t)
            errors[start:start + batch_size] = np.mean(diff * diff, axis=1)
        mse.append(float(errors.mean()))
        se.append(standard_error(errors))
        logger.info(f"t={t:.4g}: MSE {mse[-1]:.6g} ± {se[-1]:.2g}")
    return SweepResult(np.asarray(times), np.asarray(mse), np.asarray(se), n_per_t)


def relative_error_change(baseline: SweepResult, variant: SweepResult) -> np.ndarray:
    """100 * (variant - baseline) / baseline，按 t 对齐"""
    if baseline.t.shape != variant.t.shape or not np.allclose(baseline.t, variant.t,
                                                               rtol=1e-12, atol=0.0):
        raise ValidationError("两次扫描的 t 网格不一致")
    if np.any(baseline.mse == 0):
        t0 = baseline.t[np.nonzero(baseline.mse == 0)[0][0]]
        raise ValidationError(f"基线误差在 t={t0:.4g} 处为 0，无法计算相对变化")
    return 100.0 * (variant.mse - baseline.mse) / baseline.mse


def sweep_table(baseline: SweepResult, variants: Dict[str, SweepResult]) -> List[Dict]:
    """各变体相对基线的误差变化表，供文本与 Excel 报表使用"""
    changes = {name: relative_error_change(baseline, sweep) for name, sweep in variants.items()}
    rows = []
    for k, t in enumerate(baseline.t):
        row = {"t": float(t), "baseline_mse": float(baseline.mse[k])}
        for name, change in changes.items():
            row[name] = float(change[k])
        rows.append(row)
    return rows
