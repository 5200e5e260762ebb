"""文件读写：张量容器、PNG 数据集、摘要"""
import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image

from .config import SUPPORTED_IMAGE_FORMATS, TENSOR_MAGIC, TENSOR_SUFFIX
from .core import Dataset, ImageGeometry
from .errors import ValidationError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DTYPES = {"f32": "<f4", "f64": "<f8"}


def write_tensor(path: PathLike, data: np.ndarray, width: int, height: int = 1,
                 channels: int = 1, dtype: str = "f32", extra: Optional[Dict] = None) -> str:
    """
    写入张量容器：8 字节魔数 + 4 字节头长度 + JSON 头 + 小端浮点数据

    Args:
        path: 文件路径
        data: (n, width*height*channels) 数组
        dtype: "f32" 或 "f64"
        extra: 附加到头部的键值（如 origin、provenance）

    Returns:
        文件路径
    """
    if dtype not in DTYPES:
        raise ValidationError(f"不支持的数据类型: {dtype}")
    data = np.asarray(data, dtype=np.float64)
    d = width * height * channels
    data = data.reshape(-1, d) if data.size else data.reshape(0, d)
    header = {"n": int(data.shape[0]), "w": int(width), "h": int(height),
              "c": int(channels), "dtype": dtype}
    if extra:
        header.update(extra)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(data.astype(DTYPES[dtype]).tobytes())
    return str(path)


def read_tensor(path: PathLike) -> Tuple[np.ndarray, Dict]:
    """读取张量容器，返回 (float64 数组 (n, d), 头部字典)"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"文件不存在: {path}")
    raw = path.read_bytes()
    magic_len = len(TENSOR_MAGIC)
    if len(raw) < magic_len + 4 or raw[:magic_len] != TENSOR_MAGIC:
        raise ValidationError(f"无法识别的张量文件: {path}")
    (header_len,) = struct.unpack("<I", raw[magic_len:magic_len + 4])
    start = magic_len + 4
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValidationError(f"张量文件头损坏: {path} ({e})")
    dtype = header.get("dtype", "f32")
    if dtype not in DTYPES:
        raise ValidationError(f"不支持的数据类型: {dtype}")
    d = int(header["w"]) * int(header["h"]) * int(header["c"])
    n = int(header["n"])
    payload = raw[start + header_len:]
    expected = n * d * np.dtype(DTYPES[dtype]).itemsize
    if len(payload) != expected:
        raise ValidationError(f"张量文件长度不符: 期望 {expected} 字节, 实际 {len(payload)}")
    data = np.frombuffer(payload, dtype=DTYPES[dtype]).astype(np.float64).reshape(n, d)
    return data, header


def save_dataset(path: PathLike, dataset: Dataset, dtype: str = "f32") -> str:
    """保存数据集为张量容器"""
    g = dataset.geometry
    extra = {}
    if not np.array_equal(dataset.origin, np.arange(dataset.n)):
        extra["origin"] = [int(v) for v in dataset.origin]
    if dataset.provenance:
        extra["provenance"] = list(dataset.provenance)
    return write_tensor(path, dataset.images, g.width, g.height, g.channels, dtype, extra)


def _load_tensor_dataset(path: Path, geometry: Optional[ImageGeometry]) -> Dataset:
    data, header = read_tensor(path)
    file_geometry = ImageGeometry(int(header["w"]), int(header["h"]), int(header["c"]))
    if geometry is not None and geometry != file_geometry:
        raise ValidationError(f"几何不匹配: 文件为 {file_geometry}, 期望 {geometry}")
    if data.shape[0] == 0:
        raise ValidationError(f"数据集为空 (empty dataset): {path}")
    provenance = tuple(header.get("provenance", ())) + (f"tensor:{path.name}",)
    return Dataset(file_geometry, data, header.get("origin"), provenance)


def _load_png_dataset(path: Path, geometry: ImageGeometry) -> Dataset:
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in SUPPORTED_IMAGE_FORMATS)
    if not files:
        raise ValidationError(f"数据集为空 (empty dataset): 目录中没有 PNG 图片 {path}")
    mode = "L" if geometry.channels == 1 else "RGB"
    if geometry.channels not in (1, 3):
        raise ValidationError(f"PNG 只支持 1 或 3 通道: {geometry.channels}")
    rows = []
    for file in files:
        try:
            with Image.open(file) as img:
                arr = np.asarray(img.convert(mode), dtype=np.float64)
        except OSError as e:
            raise ValidationError(f"无法读取图片 {file.name}: {e}")
        if arr.shape[0] != geometry.height or arr.shape[1] != geometry.width:
            raise ValidationError(
                f"图片尺寸不匹配 {file.name}: {arr.shape[1]}x{arr.shape[0]}, "
                f"期望 {geometry.width}x{geometry.height}")
        rows.append(geometry.flatten(arr / 127.5 - 1.0))
    logger.info(f"从 {path} 读取 {len(rows)} 张 PNG")
    return Dataset(geometry, np.stack(rows), provenance=(f"png:{path.name}",))


def load_dataset(path: PathLike, geometry: Optional[ImageGeometry] = None) -> Dataset:
    """
    读取数据集：PNG 目录或张量容器文件

    Args:
        path: 目录或 .fpmc 文件
        geometry: 声明的几何（PNG 目录必填，张量文件用于校验）

    Returns:
        Dataset，像素值 v/127.5 - 1 映射到 [-1, 1]
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"路径不存在: {path}")
    if path.is_dir():
        if geometry is None:
            raise ValidationError("读取 PNG 目录需要指定图像几何")
        return _load_png_dataset(path, geometry)
    if path.suffix.lower() in SUPPORTED_IMAGE_FORMATS:
        if geometry is None:
            raise ValidationError("读取 PNG 图片需要指定图像几何")
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L" if geometry.channels == 1 else "RGB"),
                             dtype=np.float64)
        if arr.shape[:2] != (geometry.height, geometry.width):
            raise ValidationError(f"图片尺寸不匹配: {path.name}")
        return Dataset(geometry, geometry.flatten(arr / 127.5 - 1.0)[None, :],
                       provenance=(f"png:{path.name}",))
    return _load_tensor_dataset(path, geometry)


def to_bytes(values: np.ndarray) -> np.ndarray:
    """[-1, 1] 浮点 -> uint8，先截断再取整"""
    clipped = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    return np.round((clipped + 1.0) * 127.5).astype(np.uint8)


def image_from_vector(vec: np.ndarray, geometry: ImageGeometry) -> Image.Image:
    """展平向量 -> PIL 图像"""
    grid = to_bytes(geometry.unflatten(vec))
    if geometry.channels == 1:
        return Image.fromarray(grid[..., 0])
    if geometry.channels == 3:
        return Image.fromarray(grid)
    raise ValidationError(f"PNG 只支持 1 或 3 通道: {geometry.channels}")


def export_pngs(batch: np.ndarray, geometry: ImageGeometry, out_dir: PathLike,
                prefix: str = "sample") -> List[str]:
    """逐张导出 PNG"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    batch = np.atleast_2d(batch)
    width = max(4, len(str(batch.shape[0] - 1)))
    paths = []
    for i, vec in enumerate(batch):
        file = out_dir / f"{prefix}_{i:0{width}d}.png"
        image_from_vector(vec, geometry).save(file)
        paths.append(str(file))
    return paths


def save_png_grid(batch: np.ndarray, geometry: ImageGeometry, path: PathLike,
                  columns: Optional[int] = None, padding: int = 1) -> str:
    """拼接为一张联系图 (contact sheet)"""
    batch = np.atleast_2d(batch)
    n = batch.shape[0]
    columns = columns or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / columns))
    tile_w, tile_h = geometry.width + padding, geometry.height + padding
    mode = "L" if geometry.channels == 1 else "RGB"
    sheet = Image.new(mode, (columns * tile_w + padding, rows * tile_h + padding), 0)
    for i, vec in enumerate(batch):
        r, c = divmod(i, columns)
        sheet.paste(image_from_vector(vec, geometry),
                    (padding + c * tile_w, padding + r * tile_h))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sheet.save(path)
    return str(path)


def file_digest(path: PathLike) -> str:
    """文件或目录的 sha256；目录按文件名排序后逐个计算"""
    path = Path(path)
    sha = hashlib.sha256()
    if path.is_dir():
        for file in sorted(p for p in path.rglob("*") if p.is_file()):
            sha.update(str(file.relative_to(path)).encode("utf-8"))
            sha.update(file.read_bytes())
    else:
        sha.update(path.read_bytes())
    return sha.hexdigest()


def array_digest(values: np.ndarray) -> str:
    """数组内容的 sha256（按 float64 小端字节）"""
    arr = np.ascontiguousarray(np.asarray(values, dtype="<f8"))
    return hashlib.sha256(arr.tobytes()).hexdigest()


def write_json(path: PathLike, data: Dict) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
    return str(path)


def read_json(path: PathLike) -> Dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_jsonl(path: PathLike, records: List[Dict]) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    return str(path)


def read_jsonl(path: PathLike) -> List[Dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def tensor_path(directory: PathLike, name: str) -> Path:
    return Path(directory) / f"{name}{TENSOR_SUFFIX}"
