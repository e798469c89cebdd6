"""
地理-时间位置编码（GTPE）：位置、时间、位置+时间三条SIREN通路求和得到稠密编码
"""
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from utils.exceptions import ConfigError, DomainError


def param_time(day, hour):
    """时间的循环参数化

    d̂ = 2d/7 - 1, ĥ = 2h/24 - 1，返回[sin(πd̂), cos(πd̂), sin(πĥ), cos(πĥ)]。

    Args:
        day (int or torch.Tensor): 星期，0..6
        hour (int or torch.Tensor): 小时，0..23

    Returns:
        torch.Tensor: 标量输入返回(4,)，批量输入返回(B, 4)
    """
    day_t = torch.as_tensor(day)
    hour_t = torch.as_tensor(hour)
    if day_t.is_floating_point() or hour_t.is_floating_point():
        raise DomainError("day与hour必须是整数")
    if torch.any((day_t < 0) | (day_t > 6)) or torch.any((hour_t < 0) | (hour_t > 23)):
        raise DomainError(f"时间越界: day={day}, hour={hour}")
    return cyclic_time_features(day_t, hour_t)


def cyclic_time_features(day, hour):
    """不做范围检查的循环时间特征（用于验证周期性）"""
    d = 2.0 * torch.as_tensor(day, dtype=torch.float64) / 7.0 - 1.0
    h = 2.0 * torch.as_tensor(hour, dtype=torch.float64) / 24.0 - 1.0
    feats = torch.stack([torch.sin(math.pi * d), torch.cos(math.pi * d),
                         torch.sin(math.pi * h), torch.cos(math.pi * h)], dim=-1)
    return feats.float()


def param_loc(location_map):
    """位置参数化：(B, 2, H, W) -> (B, 3, H, W)，通道为[x, y, x·y]"""
    x = location_map[:, 0:1]
    y = location_map[:, 1:2]
    return torch.cat([x, y, x * y], dim=1)


class Sine(nn.Module):
    def __init__(self, w0=1.0):
        super().__init__()
        self.w0 = w0

    def forward(self, x):
        return torch.sin(self.w0 * x)


class Siren(nn.Module):
    """仿射变换 + 加权正弦激活（最后一层使用恒等激活）"""

    def __init__(self, dim_in, dim_out, w0=1.0, is_first=False, activation=True):
        super().__init__()
        self.linear = nn.Linear(dim_in, dim_out)
        self.activation = Sine(w0) if activation else nn.Identity()
        bound = 1.0 / dim_in if is_first else math.sqrt(6.0 / dim_in) / w0
        nn.init.uniform_(self.linear.weight, -bound, bound)
        nn.init.uniform_(self.linear.bias, -bound, bound)

    def forward(self, x):
        return self.activation(self.linear(x))


class SirenNet(nn.Module):
    """depth个正弦块加一个线性输出层，作用在最后一维上"""

    def __init__(self, dim_in, dim_hidden, dim_out, depth=3, w0_initial=30.0, w0=1.0):
        super().__init__()
        self.layers = nn.ModuleList()
        for i in range(depth):
            is_first = i == 0
            self.layers.append(Siren(
                dim_in if is_first else dim_hidden, dim_hidden,
                w0=w0_initial if is_first else w0, is_first=is_first))
        self.last_layer = Siren(dim_hidden, dim_out, w0=w0, activation=False)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return self.last_layer(x)


def _apply_per_pixel(net, maps):
    """对(B, C, H, W)的每个像素应用同一个网络"""
    out = net(maps.permute(0, 2, 3, 1))
    return out.permute(0, 3, 1, 2).contiguous()


class LocationEncoder(nn.Module):
    def __init__(self, dim_hidden=64, dim_out=64, depth=3, w0_initial=30.0):
        super().__init__()
        self.net = SirenNet(3, dim_hidden, dim_out, depth, w0_initial)

    def forward(self, location_map):
        return _apply_per_pixel(self.net, param_loc(location_map))


class TimeEncoder(nn.Module):
    def __init__(self, dim_hidden=64, dim_out=64, depth=3, w0_initial=30.0):
        super().__init__()
        self.net = SirenNet(4, dim_hidden, dim_out, depth, w0_initial)

    def forward(self, time_features):
        return self.net(time_features)


class LocationTimeEncoder(nn.Module):
    def __init__(self, dim_hidden=128, dim_out=64, depth=3, w0_initial=30.0):
        super().__init__()
        self.net = SirenNet(7, dim_hidden, dim_out, depth, w0_initial)

    def forward(self, location_map, time_features):
        b, _, h, w = location_map.shape
        time_maps = time_features[:, :, None, None].expand(b, time_features.shape[1], h, w)
        return _apply_per_pixel(self.net, torch.cat([param_loc(location_map), time_maps], dim=1))


@dataclass
class GtpeOutput:
    """GTPE输出：encoding为各通路之和，pathways保存各通路的单独结果"""
    encoding: torch.Tensor
    pathways: dict


class GeoTemporalEncoder(nn.Module):
    """三通路的地理-时间位置编码模块

    Args:
        pathways (tuple): 启用的通路，取自{"loc", "time", "loctime"}
        dim (int): 输出通道数
        hidden (int): loc与time通路的隐藏维度
        loctime_hidden (int): loctime通路的隐藏维度
        depth (int): 正弦块数量
        w0 (float): 第一层的频率系数
    """

    def __init__(self, pathways=("loc", "time", "loctime"), dim=64, hidden=64,
                 loctime_hidden=128, depth=3, w0=30.0):
        super().__init__()
        if not pathways:
            raise ConfigError("GTPE至少需要启用一个通路")
        self.pathways = tuple(pathways)
        self.dim = dim
        self.location_encoder = LocationEncoder(hidden, dim, depth, w0) if "loc" in pathways else None
        self.time_encoder = TimeEncoder(hidden, dim, depth, w0) if "time" in pathways else None
        self.location_time_encoder = (
            LocationTimeEncoder(loctime_hidden, dim, depth, w0) if "loctime" in pathways else None)

    def forward(self, location_map, day, hour):
        """
        Args:
            location_map (torch.Tensor): (B, 2, H, W)，取值[-1, 1]
            day (torch.Tensor): (B,)的整数星期
            hour (torch.Tensor): (B,)的整数小时

        Returns:
            GtpeOutput
        """
        b, _, h, w = location_map.shape
        time_features = param_time(day, hour).to(location_map.device, location_map.dtype)
        if time_features.dim() == 1:
            time_features = time_features.unsqueeze(0).expand(b, -1)

        encoding = location_map.new_zeros(b, self.dim, h, w)
        outputs = {}
        if self.location_encoder is not None:
            outputs["loc"] = self.location_encoder(location_map)
            encoding = encoding + outputs["loc"]
        if self.time_encoder is not None:
            # 时间编码在空间维度上复制
            outputs["time"] = self.time_encoder(time_features)[:, :, None, None].expand(b, self.dim, h, w)
            encoding = encoding + outputs["time"]
        if self.location_time_encoder is not None:
            outputs["loctime"] = self.location_time_encoder(location_map, time_features)
            encoding = encoding + outputs["loctime"]
        return GtpeOutput(encoding=encoding, pathways=outputs)
