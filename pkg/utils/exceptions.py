"""
异常类型定义，所有模块抛出的业务错误都继承自TrafficModelError
"""


class TrafficModelError(Exception):
    """交通建模系统的基础异常类"""


class DegenerateRegionError(TrafficModelError, ValueError):
    """区域范围在某个坐标轴上长度为零，或瓦片与区域不相交"""


class ShapeError(TrafficModelError, ValueError):
    """输入张量/栅格的形状不满足要求"""


class ConfigError(TrafficModelError, ValueError):
    """配置错误，例如未启用任何任务、通道数不能被注意力头数整除等"""


class DomainError(TrafficModelError, ValueError):
    """取值超出定义域，例如分布参数 nu <= 0、sigma <= 0，或时间不在 day 0..6、hour 0..23 内"""


class DatasetFormatError(TrafficModelError, ValueError):
    """数据集文件缺失或记录格式错误

    Args:
        message (str): 错误描述
        tile_id (str, optional): 出错的瓦片编号
        line (int, optional): 出错记录所在的行号（从1开始）
    """

    def __init__(self, message, tile_id=None, line=None):
        self.tile_id = tile_id
        self.line = line
        location = []
        if tile_id is not None:
            location.append(f"瓦片 {tile_id}")
        if line is not None:
            location.append(f"第{line}行")
        if location:
            message = f"[{', '.join(location)}] {message}"
        super().__init__(message)


class NoSupervisionError(TrafficModelError, ValueError):
    """瓦片或评估集合中没有任何可用的观测数据"""


class DivergenceError(TrafficModelError, RuntimeError):
    """训练过程中损失出现NaN/Inf"""
