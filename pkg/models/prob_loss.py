"""
概率损失模块：广义Student's t分布、按观测次数设定自由度的负对数似然、路段区域聚合、辅助任务损失
"""
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from config import TASKS
from utils.exceptions import DomainError, ConfigError, ShapeError


@dataclass
class SegmentEstimate:
    """一个路段上聚合后的分布参数"""
    segment_id: int
    mu_bar: float
    sigma_bar: float
    pixel_count: int
    nu: int = None


@dataclass
class LossTerm:
    """单项损失；supervised为False时value为None，训练器跳过该项"""
    value: torch.Tensor = None
    supervised: bool = False
    count: int = 0


def _as_tensors(*values):
    # 精度只由以浮点张量传入的参数决定；Python数值与整数张量跟随它，缺省为float64
    dtype = torch.float64
    device = None
    for v in values:
        if torch.is_tensor(v):
            if device is None:
                device = v.device
            if v.is_floating_point() and v.dtype != torch.float64:
                dtype = v.dtype
    return [torch.as_tensor(v, dtype=dtype, device=device) for v in values]


def student_t_log_prob(x, nu, mu, sigma):
    """广义Student's t分布的对数密度（通过log-gamma计算）

    Args:
        x: 取值
        nu: 形状参数（自由度），> 0
        mu: 平移参数
        sigma: 尺度参数，> 0

    Returns:
        torch.Tensor: 对数密度
    """
    x, nu, mu, sigma = _as_tensors(x, nu, mu, sigma)
    if torch.any(nu <= 0) or torch.any(sigma <= 0):
        raise DomainError("Student's t分布要求 nu > 0 且 sigma > 0")
    z = (x - mu) / sigma
    return (torch.lgamma((nu + 1) / 2) - torch.lgamma(nu / 2)
            - 0.5 * torch.log(nu * math.pi) - torch.log(sigma)
            - (nu + 1) / 2 * torch.log1p(z * z / nu))


def student_t_pdf(x, nu, mu, sigma):
    return torch.exp(student_t_log_prob(x, nu, mu, sigma))


def student_t_nll(y, nu, mu, sigma):
    """负对数似然，直接在对数空间计算，对mu与sigma可导"""
    return -student_t_log_prob(y, nu, mu, sigma)


def _flatten_raster(segment_raster, device):
    raster = torch.as_tensor(np.asarray(segment_raster) if not torch.is_tensor(segment_raster)
                             else segment_raster, device=device)
    return raster.reshape(-1).long()


def aggregate_segments(mu_map, sigma_map, segment_raster):
    """对每个路段的像素取mu与sigma的算术平均（可导）

    Args:
        mu_map (torch.Tensor): (H, W)
        sigma_map (torch.Tensor): (H, W)
        segment_raster: (H, W)路段编号，0为背景

    Returns:
        tuple: (ids, mu_bar, sigma_bar, pixel_counts)，均为一维张量，按编号升序
    """
    if mu_map.shape != sigma_map.shape or tuple(mu_map.shape) != tuple(np.shape(segment_raster)):
        raise ShapeError("mu、sigma与路段栅格的形状必须一致")
    raster = _flatten_raster(segment_raster, mu_map.device)
    keep = raster > 0
    ids, inverse, counts = torch.unique(raster[keep], return_inverse=True, return_counts=True)
    mu = mu_map.reshape(-1)[keep]
    sigma = sigma_map.reshape(-1)[keep]
    n = len(ids)
    mu_sum = mu.new_zeros(n).index_add(0, inverse, mu)
    sigma_sum = sigma.new_zeros(n).index_add(0, inverse, sigma)
    counts_f = counts.to(mu.dtype)
    return ids, mu_sum / counts_f, sigma_sum / counts_f, counts


def region_aggregate(mu_map, sigma_map, segment_raster):
    """区域聚合，返回SegmentEstimate列表（不含nu）"""
    ids, mu_bar, sigma_bar, counts = aggregate_segments(mu_map, sigma_map, segment_raster)
    return [SegmentEstimate(int(i), float(m), float(s), int(c))
            for i, m, s, c in zip(ids.tolist(), mu_bar.tolist(), sigma_bar.tolist(), counts.tolist())]


def observations_from_masks(segment_raster, speed, count, valid):
    """从动态速度掩膜中恢复 {segment_id: (y, nu)}"""
    raster = np.asarray(segment_raster)
    valid = np.asarray(valid).astype(bool) & (raster > 0)
    if not valid.any():
        return {}
    ids, first = np.unique(raster[valid], return_index=True)
    speeds = np.asarray(speed)[valid][first]
    counts = np.asarray(count)[valid][first]
    return {int(i): (float(y), int(c)) for i, y, c in zip(ids, speeds, counts)}


def speed_loss(speed, segment_raster, observations):
    """单张影像的速度损失

    先做区域聚合，再以路段观测次数作为nu，对观测到的路段取NLL的平均；未观测的路段不参与。

    Args:
        speed (TParamMaps): mu与sigma均为(H, W)
        segment_raster: (H, W)路段编号
        observations (dict): {segment_id: (y, nu)}，当前(day, hour)的观测

    Returns:
        LossTerm: 没有观测路段时supervised为False
    """
    ids, mu_bar, sigma_bar, _ = aggregate_segments(speed.mu, speed.sigma, segment_raster)
    selected, ys, nus = [], [], []
    for pos, seg_id in enumerate(ids.tolist()):
        obs = observations.get(seg_id)
        if obs is None:
            continue
        selected.append(pos)
        ys.append(obs[0])
        nus.append(obs[1])
    if not selected:
        return LossTerm(None, False, 0)
    index = torch.as_tensor(selected, device=mu_bar.device)
    y = torch.as_tensor(ys, dtype=mu_bar.dtype, device=mu_bar.device)
    nu = torch.as_tensor(nus, dtype=mu_bar.dtype, device=mu_bar.device)
    nll = student_t_nll(y, nu, mu_bar[index], sigma_bar[index])
    return LossTerm(nll.mean(), True, len(selected))


def batch_speed_loss(speed, segment_rasters, speed_masks, count_masks, valid_masks):
    """批量速度损失：对有监督的影像取各自损失的平均"""
    terms = []
    for i in range(speed.mu.shape[0]):
        observations = observations_from_masks(
            _to_numpy(segment_rasters[i]), _to_numpy(speed_masks[i]),
            _to_numpy(count_masks[i]), _to_numpy(valid_masks[i]))
        maps = type(speed)(mu=speed.mu[i], sigma=speed.sigma[i])
        term = speed_loss(maps, segment_rasters[i], observations)
        if term.supervised:
            terms.append(term)
    if not terms:
        return LossTerm(None, False, 0)
    value = torch.stack([t.value for t in terms]).mean()
    return LossTerm(value, True, sum(t.count for t in terms))


def _to_numpy(x):
    return x.detach().cpu().numpy() if torch.is_tensor(x) else np.asarray(x)


def road_loss(road_logits, road_mask, smooth=1.0):
    """二值交叉熵 + (1 - Dice)，Dice在分子分母上都加平滑项"""
    target = torch.as_tensor(road_mask, device=road_logits.device).to(road_logits.dtype)
    if target.shape != road_logits.shape:
        raise ShapeError("道路logits与掩膜形状不一致")
    bce = F.binary_cross_entropy_with_logits(road_logits, target)
    prob = torch.sigmoid(road_logits)
    dice = (2 * (prob * target).sum() + smooth) / (prob.sum() + target.sum() + smooth)
    return bce + (1 - dice)


def orientation_loss(orientation_logits, orientation_bins):
    """方向分类交叉熵，只在bin >= 0的像素上计算"""
    bins = torch.as_tensor(orientation_bins, device=orientation_logits.device).long()
    supervised = int((bins >= 0).sum())
    if supervised == 0:
        return LossTerm(None, False, 0)
    value = F.cross_entropy(orientation_logits, bins, ignore_index=-1)
    return LossTerm(value, True, supervised)


def total_loss(speed_l, road_l, orient_l, tasks=TASKS):
    """多任务总损失：各项等权相加，未启用或无监督的项记为0"""
    if not tasks:
        raise ConfigError("至少需要启用一个任务")
    terms = {"speed": speed_l, "road": road_l, "orientation": orient_l}
    total = 0.0
    for name in TASKS:
        value = terms[name]
        if isinstance(value, LossTerm):
            value = value.value
        if name in tasks and value is not None:
            total = total + value
    return total
