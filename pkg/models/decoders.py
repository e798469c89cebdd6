"""
任务解码器：全线性的MLP解码器以及速度、道路、方向三个任务头
"""
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import SIGMA_FLOOR, ORIENTATION_BINS
from utils.exceptions import ShapeError


@dataclass
class TParamMaps:
    """逐像素的Student's t先验参数（km/h）"""
    mu: torch.Tensor
    sigma: torch.Tensor


@dataclass
class TaskOutputs:
    """模型三个分支的输出；未计算的任务为None"""
    speed: TParamMaps = None
    road_logits: torch.Tensor = None
    orientation_logits: torch.Tensor = None


class MLPDecoder(nn.Module):
    """SegFormer风格的全MLP解码器

    各阶段先用线性层统一到embed_dim通道，上采样到1/4分辨率后拼接，
    经1×1卷积融合、dropout，再线性映射到out_channels，最后放大4倍回到输入分辨率。
    """

    def __init__(self, in_channels=(64, 128, 256, 512), embed_dim=512, out_channels=1, dropout=0.1):
        super().__init__()
        self.in_channels = tuple(in_channels)
        self.linear_c = nn.ModuleList([nn.Linear(c, embed_dim) for c in in_channels])
        self.fuse = nn.Sequential(
            nn.Conv2d(embed_dim * len(in_channels), embed_dim, 1, bias=False),
            nn.BatchNorm2d(embed_dim),
            nn.ReLU(inplace=True),
        )
        self.dropout = nn.Dropout2d(dropout)
        self.classifier = nn.Conv2d(embed_dim, out_channels, 1)

    def forward(self, pyramid, output_size=None):
        features = pyramid.as_list()
        if len(features) != len(self.linear_c):
            raise ShapeError("特征金字塔层数与解码器不一致")
        target = features[0].shape[-2:]
        unified = []
        for f, linear, channels in zip(features, self.linear_c, self.in_channels):
            b, c, h, w = f.shape
            if c != channels:
                raise ShapeError(f"特征通道数{c}与解码器期望的{channels}不一致")
            x = linear(f.flatten(2).transpose(1, 2)).transpose(1, 2).reshape(b, -1, h, w)
            unified.append(F.interpolate(x, size=target, mode="bilinear", align_corners=False))
        # 从最粗到最细拼接
        x = self.fuse(torch.cat(unified[::-1], dim=1))
        x = self.classifier(self.dropout(x))
        if output_size is None:
            output_size = (target[0] * 4, target[1] * 4)
        return F.interpolate(x, size=output_size, mode="bilinear", align_corners=False)


class SpeedHead(nn.Module):
    """速度分支：两个通道经softplus得到mu与sigma（sigma另加下限）"""

    def __init__(self, in_channels=(64, 128, 256, 512), embed_dim=512, dropout=0.1, sigma_floor=SIGMA_FLOOR):
        super().__init__()
        self.decoder = MLPDecoder(in_channels, embed_dim, 2, dropout)
        self.sigma_floor = sigma_floor

    def activate(self, raw):
        """把(B, 2, H, W)的原始输出变换为TParamMaps"""
        mu = F.softplus(raw[:, 0])
        sigma = F.softplus(raw[:, 1]) + self.sigma_floor
        return TParamMaps(mu=mu, sigma=sigma)

    def forward(self, pyramid, output_size=None):
        return self.activate(self.decoder(pyramid, output_size))


class RoadHead(nn.Module):
    def __init__(self, in_channels=(64, 128, 256, 512), embed_dim=512, dropout=0.1):
        super().__init__()
        self.decoder = MLPDecoder(in_channels, embed_dim, 1, dropout)

    def forward(self, pyramid, output_size=None):
        return self.decoder(pyramid, output_size)[:, 0]


class OrientationHead(nn.Module):
    def __init__(self, in_channels=(64, 128, 256, 512), embed_dim=512, dropout=0.1, bins=ORIENTATION_BINS):
        super().__init__()
        self.decoder = MLPDecoder(in_channels, embed_dim, bins, dropout)

    def forward(self, pyramid, output_size=None):
        return self.decoder(pyramid, output_size)
