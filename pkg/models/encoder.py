"""
视觉编码器：卷积stem + 两个MBConv阶段 + 两个多头自注意力阶段，输出四级特征金字塔
"""
from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn as nn
import torch.nn.functional as F
from timm.layers import trunc_normal_

from config import EncoderConfig
from utils.exceptions import ShapeError, ConfigError


@dataclass
class FeaturePyramid:
    """四级多分辨率特征，分辨率依次为输入的1/4、1/8、1/16、1/32"""
    stage1: torch.Tensor
    stage2: torch.Tensor
    stage3: torch.Tensor
    stage4: torch.Tensor

    def as_list(self):
        return [self.stage1, self.stage2, self.stage3, self.stage4]


class ConvStem(nn.Module):
    """三层3×3卷积stem，随后归一化、ReLU与3×3最大池化，整体下采样4倍"""

    def __init__(self, in_channels=3, mid_channels=48, out_channels=64):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv2d(in_channels, mid_channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(mid_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid_channels, out_channels, 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1, bias=False),
        )
        self.norm = nn.BatchNorm2d(out_channels)
        self.act = nn.ReLU(inplace=True)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)

    def forward(self, x):
        if x.shape[-1] % 32 != 0 or x.shape[-2] % 32 != 0:
            raise ShapeError(f"输入空间尺寸必须能被32整除，当前为{tuple(x.shape[-2:])}")
        return self.pool(self.act(self.norm(self.convs(x))))


class SqueezeExcitation(nn.Module):
    def __init__(self, channels, hidden):
        super().__init__()
        self.reduce = nn.Conv2d(channels, hidden, 1)
        self.expand = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        s = F.adaptive_avg_pool2d(x, 1)
        s = self.expand(F.silu(self.reduce(s)))
        return x * torch.sigmoid(s)


class MBConvBlock(nn.Module):
    """倒残差块：1×1扩张 -> 3×3深度卷积 -> SE -> 1×1投影

    SE隐藏维度按输入通道计算（se_ratio·Cin）；只有输入输出形状一致时才加残差。
    """

    def __init__(self, in_channels, out_channels, stride=1, expansion=4, se_ratio=0.25):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigError(f"MBConv的stride只能是1或2，当前为{stride}")
        hidden = in_channels * expansion
        se_hidden = max(1, int(in_channels * se_ratio))
        self.use_residual = in_channels == out_channels and stride == 1
        self.expand = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 1, bias=False),
            nn.BatchNorm2d(hidden),
            nn.SiLU(inplace=True),
        )
        self.depthwise = nn.Sequential(
            nn.Conv2d(hidden, hidden, 3, stride=stride, padding=1, groups=hidden, bias=False),
            nn.BatchNorm2d(hidden),
            nn.SiLU(inplace=True),
        )
        self.se = SqueezeExcitation(hidden, se_hidden)
        self.project = nn.Sequential(
            nn.Conv2d(hidden, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
        )

    def forward(self, x):
        out = self.project(self.se(self.depthwise(self.expand(x))))
        if self.use_residual:
            out = out + x
        return out


class OverlapPatchEmbed(nn.Module):
    """重叠patch嵌入：3×3卷积（stride 2）后接LayerNorm，输出token序列"""

    def __init__(self, in_channels, embed_dim):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, embed_dim, 3, stride=2, padding=1)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, x):
        x = self.proj(x)
        _, _, h, w = x.shape
        x = x.flatten(2).transpose(1, 2)
        return self.norm(x), h, w


@lru_cache(maxsize=None)
def relative_position_index(grid_size):
    """(N, N)的相对位置索引表，N = grid_size²；同一网格的所有注意力块共用一份"""
    coords = torch.stack(torch.meshgrid(
        torch.arange(grid_size), torch.arange(grid_size), indexing="ij"))  # 2, h, w
    coords = coords.flatten(1)
    relative = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0).contiguous()
    relative[:, :, 0] += grid_size - 1
    relative[:, :, 1] += grid_size - 1
    relative[:, :, 0] *= 2 * grid_size - 1
    return relative.sum(-1)


class RelativePositionAttention(nn.Module):
    """全局多头自注意力，每个头带有按token偏移索引的可学习相对位置偏置表"""

    def __init__(self, dim, grid_size, num_heads=8):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigError(f"通道数{dim}不能被注意力头数{num_heads}整除")
        self.num_heads = num_heads
        self.grid_size = grid_size
        self.qkv = nn.Linear(dim, dim * 3, bias=False)
        self.proj = nn.Linear(dim, dim)

        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * grid_size - 1) * (2 * grid_size - 1), num_heads))
        self.register_buffer("relative_position_index", relative_position_index(grid_size), persistent=False)
        trunc_normal_(self.relative_position_bias_table, std=.02)

    def relative_bias(self):
        n = self.grid_size * self.grid_size
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        return bias.view(n, n, -1).permute(2, 0, 1).contiguous()

    def forward(self, x):
        b, n, c = x.shape
        if n != self.grid_size * self.grid_size:
            raise ShapeError(f"token数量{n}与配置的网格{self.grid_size}²不一致")
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        bias = self.relative_bias().unsqueeze(0).to(q.dtype)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=bias)
        out = out.transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class MHSABlock(nn.Module):
    """pre-norm Transformer块：LN -> 注意力 -> 残差，LN -> MLP -> 残差"""

    def __init__(self, dim, grid_size, num_heads=8, mlp_ratio=4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = RelativePositionAttention(dim, grid_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class MHSAStage(nn.Module):
    """重叠patch嵌入 + 若干MHSA块；位置编码在嵌入之后加一次"""

    def __init__(self, in_channels, dim, depth, grid_size, num_heads=8, mlp_ratio=4.0):
        super().__init__()
        self.embed = OverlapPatchEmbed(in_channels, dim)
        self.blocks = nn.ModuleList(
            [MHSABlock(dim, grid_size, num_heads, mlp_ratio) for _ in range(depth)])

    def forward(self, x, pe=None):
        tokens, h, w = self.embed(x)
        if pe is not None:
            if pe.shape[-2:] != (h, w):
                raise ShapeError(f"位置编码尺寸{tuple(pe.shape[-2:])}与token网格({h}, {w})不一致")
            tokens = tokens + pe.flatten(2).transpose(1, 2)
        for block in self.blocks:
            tokens = block(tokens)
        return tokens.transpose(1, 2).reshape(x.shape[0], -1, h, w)


def fuse_stage(projection, encoding, stage_hw):
    """将64通道GTPE编码投影到阶段通道数，再双线性插值到该阶段的token网格

    Args:
        projection (nn.Conv2d): 3×3卷积，64 -> Cstage
        encoding (torch.Tensor): (B, 64, H, W)
        stage_hw (tuple): 目标(h, w)

    Returns:
        torch.Tensor: (B, Cstage, h, w)
    """
    projected = projection(encoding)
    return F.interpolate(projected, size=stage_hw, mode="bilinear", align_corners=False)


class HybridEncoder(nn.Module):
    """混合卷积-Transformer编码器

    Args:
        config (EncoderConfig): 层规划
        context_dim (int): GTPE编码的通道数；为0时不创建阶段投影（不使用上下文）
    """

    def __init__(self, config=None, context_dim=0):
        super().__init__()
        self.config = config or EncoderConfig()
        c1, c2, c3, c4 = self.config.channels
        exp, se = self.config.expansion, self.config.se_ratio
        grid3, grid4 = self.config.token_grids

        self.stem = ConvStem(3, self.config.stem_mid, c1)
        self.stage1 = nn.ModuleList(
            [MBConvBlock(c1, c1, 1, exp, se) for _ in range(self.config.mbconv_depths[0])])
        self.stage2 = nn.ModuleList(
            [MBConvBlock(c1, c2, 2, exp, se)]
            + [MBConvBlock(c2, c2, 1, exp, se) for _ in range(self.config.mbconv_depths[1] - 1)])
        self.stage3 = MHSAStage(c2, c3, self.config.mhsa_depths[0], grid3,
                                self.config.heads, self.config.mlp_ratio)
        self.stage4 = MHSAStage(c3, c4, self.config.mhsa_depths[1], grid4,
                                self.config.heads, self.config.mlp_ratio)

        self.context_dim = context_dim
        if context_dim > 0:
            self.stage3_context = nn.Conv2d(context_dim, c3, 3, padding=1)
            self.stage4_context = nn.Conv2d(context_dim, c4, 3, padding=1)
        else:
            self.stage3_context = None
            self.stage4_context = None

        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(m):
        if isinstance(m, nn.Linear):
            trunc_normal_(m.weight, std=.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    def forward(self, image, encoding=None):
        """编码影像

        Args:
            image (torch.Tensor): (B, 3, H, W)
            encoding (torch.Tensor, optional): (B, context_dim, H, W)的GTPE编码

        Returns:
            FeaturePyramid: 四级特征
        """
        size = self.config.image_size
        if tuple(image.shape[-2:]) != (size, size):
            raise ShapeError(f"输入尺寸{tuple(image.shape[-2:])}与配置的{size}×{size}不一致")
        if self.context_dim > 0 and encoding is None:
            raise ConfigError("编码器启用了上下文，但没有提供GTPE编码")

        x = self.stem(image)
        for block in self.stage1:
            x = block(x)
        f1 = x
        for block in self.stage2:
            x = block(x)
        f2 = x

        grid3, grid4 = self.config.token_grids
        pe3 = pe4 = None
        if self.context_dim > 0:
            pe3 = fuse_stage(self.stage3_context, encoding, (grid3, grid3))
            pe4 = fuse_stage(self.stage4_context, encoding, (grid4, grid4))
        f3 = self.stage3(f2, pe3)
        f4 = self.stage4(f3, pe4)
        return FeaturePyramid(f1, f2, f3, f4)
