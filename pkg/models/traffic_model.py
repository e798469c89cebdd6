"""
多任务交通模型：编码器 + GTPE + 三个任务解码器
"""
import logging

import torch
import torch.nn as nn

from config import ModelConfig, TASKS, model_config_from_dict, model_config_to_dict
from models.encoder import HybridEncoder
from models.gtpe import GeoTemporalEncoder
from models.decoders import SpeedHead, RoadHead, OrientationHead, TaskOutputs
from utils.exceptions import ConfigError

logger = logging.getLogger(__name__)


class TrafficModel(nn.Module):
    """以地理-时间上下文为条件的多任务分割网络

    Args:
        config (ModelConfig): 模型配置
    """

    def __init__(self, config=None):
        super().__init__()
        self.config = config or ModelConfig()
        enc = self.config.encoder
        if self.config.uses_context:
            self.gtpe = GeoTemporalEncoder(
                self.config.context, self.config.gtpe_dim, self.config.gtpe_hidden,
                self.config.gtpe_loctime_hidden, self.config.gtpe_depth, self.config.siren_w0)
            context_dim = self.config.gtpe_dim
        else:
            self.gtpe = None
            context_dim = 0
        self.encoder = HybridEncoder(enc, context_dim)
        channels = enc.channels
        dim, drop = self.config.decoder_dim, self.config.dropout
        # 三个任务的解码器互不共享参数
        self.speed_head = SpeedHead(channels, dim, drop, self.config.sigma_floor)
        self.road_head = RoadHead(channels, dim, drop)
        self.orientation_head = OrientationHead(channels, dim, drop, self.config.orientation_bins)

    def encode_context(self, location_map, day, hour):
        if self.gtpe is None:
            return None
        return self.gtpe(location_map, day, hour).encoding

    def forward(self, image, location_map=None, day=None, hour=None, tasks=TASKS):
        """
        Args:
            image (torch.Tensor): (B, 3, H, W)，取值[0, 1]
            location_map (torch.Tensor, optional): (B, 2, H, W)
            day (torch.Tensor, optional): (B,)
            hour (torch.Tensor, optional): (B,)
            tasks (tuple): 需要计算的任务分支

        Returns:
            TaskOutputs
        """
        if self.gtpe is not None and (location_map is None or day is None or hour is None):
            raise ConfigError("模型启用了地理-时间上下文，必须提供location_map、day与hour")
        if not self.config.use_image:
            image = torch.zeros_like(image)

        encoding = self.encode_context(location_map, day, hour)
        pyramid = self.encoder(image, encoding)
        size = tuple(image.shape[-2:])

        outputs = TaskOutputs()
        if "speed" in tasks:
            outputs.speed = self.speed_head(pyramid, size)
        if "road" in tasks:
            outputs.road_logits = self.road_head(pyramid, size)
        if "orientation" in tasks:
            outputs.orientation_logits = self.orientation_head(pyramid, size)
        return outputs


def count_parameters(module, trainable_only=True):
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def model_summary(model):
    """按组件统计可训练参数量

    Returns:
        dict: 组件名 -> 参数量，另含"total"
    """
    enc = model.encoder
    summary = {
        "stem": count_parameters(enc.stem),
        "mbconv_stage1": count_parameters(enc.stage1),
        "mbconv_stage2": count_parameters(enc.stage2),
        "mhsa_stage3": count_parameters(enc.stage3),
        "mhsa_stage4": count_parameters(enc.stage4),
        "context_projections": count_parameters(enc.stage3_context) + count_parameters(enc.stage4_context),
        "gtpe": count_parameters(model.gtpe),
        "speed_decoder": count_parameters(model.speed_head),
        "road_decoder": count_parameters(model.road_head),
        "orientation_decoder": count_parameters(model.orientation_head),
    }
    summary["total"] = count_parameters(model)
    return summary


def build_model(config=None):
    model = TrafficModel(config)
    logger.info("模型构建完成，可训练参数 %s 个", f"{count_parameters(model):,}")
    return model


def load_checkpoint(path, map_location="cpu"):
    try:
        return torch.load(path, map_location=map_location, weights_only=False)
    except FileNotFoundError:
        raise ConfigError(f"找不到检查点: {path}")


def model_from_checkpoint(checkpoint, map_location="cpu"):
    """从检查点（路径或已加载的字典）恢复模型

    Returns:
        tuple: (TrafficModel, dict)，第二项为完整的检查点字典
    """
    if not isinstance(checkpoint, dict):
        checkpoint = load_checkpoint(checkpoint, map_location)
    config = model_config_from_dict(checkpoint["model_config"])
    model = TrafficModel(config)
    model.load_state_dict(checkpoint["model_state"])
    return model, checkpoint


def checkpoint_payload(model, **extra):
    payload = {
        "model_config": model_config_to_dict(model.config),
        "model_state": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    payload.update(extra)
    return payload
