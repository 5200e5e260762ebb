"""配置管理模块"""
import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv


def get_config_dir() -> Path:
    """获取配置目录（FPMC_HOME 优先，否则为项目根目录）"""
    home = os.environ.get("FPMC_HOME")
    if home:
        config_dir = Path(home)
        config_dir.mkdir(parents=True, exist_ok=True)
        return config_dir
    # 开发环境 - 使用项目根目录（fpmc 的父目录）
    return Path(__file__).parent.parent


# 配置文件路径
CONFIG_DIR = get_config_dir()
ENV_FILE = CONFIG_DIR / ".env"

# 加载 .env 文件
load_dotenv(ENV_FILE)

# 运行配置
FPMC_THREADS = os.getenv("FPMC_THREADS", "")
FPMC_CHUNK_ELEMENTS = int(float(os.getenv("FPMC_CHUNK_ELEMENTS", "2e7")))
FPMC_OUTPUT_DIR = os.getenv("FPMC_OUTPUT_DIR", "./fpmc_runs")


def get_threads(override: Optional[int] = None) -> int:
    """线程数：命令行参数 > 环境变量 > CPU 核数"""
    if override is not None and override > 0:
        return int(override)
    if FPMC_THREADS:
        try:
            value = int(FPMC_THREADS)
            if value > 0:
                return value
        except ValueError:
            pass
    return os.cpu_count() or 1


def save_config(threads: Optional[int] = None, chunk_elements: Optional[int] = None) -> None:
    """保存配置到 .env 文件"""
    global FPMC_THREADS, FPMC_CHUNK_ELEMENTS

    if threads is None:
        threads = get_threads()
    if chunk_elements is None:
        chunk_elements = FPMC_CHUNK_ELEMENTS

    config_content = f"""# FPMC 运行配置
FPMC_THREADS={int(threads)}
FPMC_CHUNK_ELEMENTS={int(chunk_elements)}
"""

    with open(ENV_FILE, "w", encoding="utf-8") as f:
        f.write(config_content)

    try:
        os.chmod(ENV_FILE, 0o600)
    except OSError:
        # Windows 可能不支持 chmod，忽略错误
        pass

    # 重新加载配置
    load_dotenv(ENV_FILE, override=True)

    FPMC_THREADS = str(int(threads))
    FPMC_CHUNK_ELEMENTS = int(chunk_elements)


# 文件格式
TENSOR_SUFFIX = ".fpmc"
TENSOR_MAGIC = b"FPMCTENS"
SUPPORTED_IMAGE_FORMATS = {".png"}

# EDM 采样时间网格默认值
EDM_T_MIN = 0.002
EDM_T_MAX = 80.0
EDM_RHO = 7.0

# Wiener 矩阵显式构造的维度上限
WIENER_DENSE_LIMIT = 8192

# 后验权重归一化后的下溢阈值
WEIGHT_FLUSH = 1e-300

# 数据集预设：步数、各方法超参数表、weight decay 生效阈值
PRESETS = {
    "cifar10": {
        "num_steps": 18,
        "pspc-square": [32] * 7 + [23, 15, 11, 7, 5] + [3] * 6,
        "ls": [31] * 6 + [29, 25, 15, 11, 7, 5] + [3] * 6,
        "els": [31] * 7 + [27, 19, 15, 9, 7, 5] + [3] * 5,
        "pspc-flex": [1.0] * 7 + [0.7, 0.7, 0.5, 0.4, 0.4, 0.4, 0.4] + [0.3] * 4,
        "lukoianov": 0.05,
        "weight_decay_min_t": 1.92,
    },
    "ffhq64": {
        "num_steps": 40,
        "pspc-square": [64] * 12 + [43, 43, 43, 35, 35, 27, 23, 19, 15, 15, 11, 9, 9, 7, 5, 5]
        + [3] * 12,
        "ls": [63] * 11 + [55, 51, 45, 39, 35, 31, 29, 25, 21, 17, 15, 11, 7, 7, 7, 7, 5]
        + [3] * 12,
        "pspc-flex": [1.0] * 11 + [0.8, 0.7, 0.6, 0.6, 0.6, 0.6, 0.55, 0.5, 0.45, 0.4, 0.4,
                                   0.4, 0.35] + [0.3] * 16,
        "lukoianov": 0.02,
        "weight_decay_min_t": 4.37,
    },
    "afhq64": {
        "num_steps": 40,
        "pspc-square": [64] * 11 + [51, 43, 43, 35, 27, 23, 19, 15, 15, 15, 9, 9, 9, 7, 5, 5]
        + [3] * 13,
        "ls": [63] * 5 + [55] + [63] * 5 + [55, 51, 45, 37, 31, 23, 21, 17, 15, 13, 11, 9, 7, 5]
        + [3] * 15,
        "pspc-flex": [1.0] * 9 + [0.85, 0.7, 0.65, 0.6, 0.6, 0.6, 0.55, 0.5, 0.45, 0.4, 0.35]
        + [0.3] * 20,
        "lukoianov": 0.02,
        "weight_decay_min_t": 8.03,
    },
}

# 微调默认超参数
FINETUNE_DEFAULTS = {
    "learning_rate": 0.05,
    "betas": (0.9, 0.999),
    "eps": 1e-8,
    "weight_decay": 0.01,
    "batch_size": 256,
    "max_steps": 2000,
    "mc_support_size": 10000,
    "loss_weight": 1.0,
    "init_floor": 1e-3,
}

# 数据增强默认参数
AUGMENT_STRATEGIES = ("hflip", "vflip", "translate", "rotate", "scale")
REFLECTION_STRATEGIES = ("hflip", "vflip")
AUGMENT_PROPOSALS_PER_IMAGE = 20
TRANSLATE_FRACTION = 1.0 / 8.0
SCALE_LOG_STD = 0.2
LABEL_DECIMALS = 6

# 支持的构造方法
BUILD_METHODS = ("optimal", "wiener", "pspc-square", "pspc-flex", "ls", "els", "lukoianov")
