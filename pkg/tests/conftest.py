"""Pytest 配置和共享 fixtures"""
import sys
import tempfile
import pytest
import numpy as np
from pathlib import Path

# 添加项目根目录到 Python 路径
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))


@pytest.fixture
def temp_dir():
    """创建临时目录用于测试"""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield tmpdir


@pytest.fixture
def geom4():
    """4x4 单通道几何"""
    from fpmc.core import ImageGeometry
    return ImageGeometry(4, 4, 1)


@pytest.fixture
def small_dataset(geom4):
    """6 张 4x4 随机图像"""
    from fpmc.core import Dataset
    rng = np.random.default_rng(7)
    return Dataset(geom4, rng.uniform(-1, 1, size=(6, geom4.d)))


@pytest.fixture
def edm18():
    """18 步 EDM 调度"""
    from fpmc.core import DiffusionSchedule
    return DiffusionSchedule.edm(18)


@pytest.fixture
def toy_manifold():
    """8x8 低维流形合成数据"""
    from fpmc.core import ImageGeometry
    from fpmc.toydata import manifold_dataset
    return manifold_dataset(64, ImageGeometry(8, 8, 1), seed=1)


@pytest.fixture
def mock_env(monkeypatch):
    """Mock 环境变量"""
    monkeypatch.setenv("FPMC_THREADS", "2")
    monkeypatch.setenv("FPMC_CHUNK_ELEMENTS", "1e5")
    monkeypatch.setenv("FPMC_OUTPUT_DIR", "./runs_test")
