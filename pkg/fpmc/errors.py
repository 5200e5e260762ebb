"""异常类型"""
from typing import Optional, Tuple


class FpmcError(Exception):
    """FPMC 异常基类"""


class ValidationError(FpmcError, ValueError):
    """输入、几何或前置条件不满足"""


class CoverageError(ValidationError):
    """某个维度上响应权重之和为 0"""

    def __init__(self, message: str, step: Optional[int] = None,
                 pixel: Optional[Tuple[int, int]] = None):
        super().__init__(message)
        self.step = step
        self.pixel = pixel


class NumericalError(FpmcError, ArithmeticError):
    """数值计算出现非有限值"""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step
