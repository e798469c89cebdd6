"""
应用模块：稠密预测、路段时间序列、运动模型与旅行时间导出、时间嵌入PCA以及速度不确定性曲线
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch
import matplotlib
from matplotlib.colors import Normalize, to_hex
from shapely.geometry import LineString, mapping

from config import (MIN_TRAVEL_SPEED_KMH, MOTION_MODEL_STRIDE, ROAD_PROB_THRESHOLD, ORIENTATION_BINS,
                    UNCERTAINTY_MAX_SPEED, UNCERTAINTY_STEP)
from models.gtpe import param_time
from models.prob_loss import region_aggregate, student_t_pdf
from utils.exceptions import ConfigError, NoSupervisionError
from utils.georef import bin_bearing

logger = logging.getLogger(__name__)

ALL_TIMES = [(d, h) for d in range(7) for h in range(24)]


@dataclass
class DensePrediction:
    """单个瓦片在某一时刻的全分辨率预测（numpy数组）"""
    tile_id: str
    day: int
    hour: int
    mu: np.ndarray
    sigma: np.ndarray
    road_prob: np.ndarray
    orientation_bins: np.ndarray
    segment_estimates: dict = field(default_factory=dict)
    aggregated_mu: np.ndarray = None


def _model_device(model):
    try:
        return next(model.parameters()).device
    except StopIteration:
        return torch.device("cpu")


def predict_times(model, tile_data, times, batch_size=8, with_overlay=False):
    """对同一个瓦片批量预测多个时刻

    Args:
        model (nn.Module): TrafficModel或具有相同调用约定的模块
        tile_data (TileData): 预处理后的瓦片
        times (list): [(day, hour)]
        batch_size (int): 每次前向的时刻数
        with_overlay (bool): 是否同时计算路段聚合结果

    Returns:
        list: DensePrediction列表，顺序与times一致
    """
    for day, hour in times:
        param_time(day, hour)
    device = _model_device(model)
    model.eval()
    image = torch.from_numpy(tile_data.tile.image).to(device)
    location = torch.from_numpy(tile_data.location_map).to(device)

    results = []
    with torch.no_grad():
        for start in range(0, len(times), batch_size):
            chunk = times[start:start + batch_size]
            b = len(chunk)
            days = torch.tensor([d for d, _ in chunk], dtype=torch.long, device=device)
            hours = torch.tensor([h for _, h in chunk], dtype=torch.long, device=device)
            out = model(image.expand(b, -1, -1, -1), location.expand(b, -1, -1, -1), days, hours)
            mu = out.speed.mu.float().cpu().numpy()
            sigma = out.speed.sigma.float().cpu().numpy()
            road = torch.sigmoid(out.road_logits).float().cpu().numpy()
            bins = out.orientation_logits.argmax(dim=1).cpu().numpy()
            for i, (day, hour) in enumerate(chunk):
                pred = DensePrediction(tile_data.id, day, hour, mu[i], sigma[i], road[i], bins[i])
                if with_overlay:
                    attach_overlay(pred, tile_data.masks.segment_raster)
                results.append(pred)
    return results


def predict_dense(model, tile_data, day, hour, with_overlay=False):
    """稠密预测：速度mu与sigma图、道路概率、方向分箱；可选路段聚合叠加图"""
    return predict_times(model, tile_data, [(day, hour)], 1, with_overlay)[0]


def attach_overlay(pred, segment_raster):
    """计算路段聚合结果，并生成背景为NaN的聚合mu图"""
    estimates = region_aggregate(torch.from_numpy(pred.mu), torch.from_numpy(pred.sigma), segment_raster)
    pred.segment_estimates = {e.segment_id: e for e in estimates}
    overlay = np.full(pred.mu.shape, np.nan, dtype=np.float32)
    for e in estimates:
        overlay[segment_raster == e.segment_id] = e.mu_bar
    pred.aggregated_mu = overlay
    return pred


def _require_segment(tile_data, segment_id):
    if not np.any(tile_data.masks.segment_raster == segment_id):
        raise NoSupervisionError(f"路段 {segment_id} 在瓦片 {tile_data.id} 中没有像素")
    for seg in tile_data.segments:
        if seg.segment_id == segment_id:
            return seg
    raise NoSupervisionError(f"瓦片 {tile_data.id} 中没有路段 {segment_id}")


def segment_timeseries(model, tile_data, segment_id, batch_size=8):
    """一个路段在一周168个时刻上的聚合预测

    Returns:
        pd.DataFrame: 列为day, hour, mu_bar, sigma_bar, observed_speed, count
    """
    segment = _require_segment(tile_data, segment_id)
    rows = []
    for pred in predict_times(model, tile_data, ALL_TIMES, batch_size, with_overlay=True):
        estimate = pred.segment_estimates[segment_id]
        speed, count = segment.observations.get((pred.day, pred.hour), (np.nan, 0))
        rows.append({"day": pred.day, "hour": pred.hour, "mu_bar": estimate.mu_bar,
                     "sigma_bar": estimate.sigma_bar, "observed_speed": speed, "count": count})
    return pd.DataFrame(rows)


def export_motion_model(pred, tile, stride=MOTION_MODEL_STRIDE, threshold=ROAD_PROB_THRESHOLD,
                        k=ORIENTATION_BINS, vmax=None):
    """把稠密预测转为GeoJSON箭头集合

    在步长为stride的网格上采样道路概率大于threshold的像素，箭头方向取分箱的代表方位角k·360/K，
    长度为0.8·stride个像素，颜色按速度映射。

    Returns:
        dict: GeoJSON FeatureCollection
    """
    n = pred.mu.shape[0]
    centers = range(stride // 2, n, stride)
    vmax = vmax or max(float(pred.mu.max()), 1.0)
    norm = Normalize(vmin=0.0, vmax=vmax)
    colormap = matplotlib.colormaps["RdYlGn"]
    length = 0.8 * stride * tile.resolution

    features = []
    for i in centers:
        for j in centers:
            if pred.road_prob[i, j] <= threshold:
                continue
            bearing = float(bin_bearing(pred.orientation_bins[i, j], k))
            e = tile.bounds.easting_min + (j + 0.5) * tile.resolution
            nn = tile.bounds.northing_max - (i + 0.5) * tile.resolution
            rad = np.radians(bearing)
            arrow = LineString([(e, nn), (e + length * np.cos(rad), nn + length * np.sin(rad))])
            speed = float(pred.mu[i, j])
            features.append({
                "type": "Feature",
                "geometry": mapping(arrow),
                "properties": {
                    "bearing": bearing,
                    "speed_kmh": speed,
                    "color": to_hex(colormap(norm(speed))),
                    "row": int(i),
                    "col": int(j),
                },
            })
    logger.info("运动模型导出 %d 个箭头（采样点 %d 个）", len(features), len(centers) ** 2)
    return {"type": "FeatureCollection", "features": features}


def travel_time_seconds(length_m, mu_bar, floor=MIN_TRAVEL_SPEED_KMH):
    """旅行时间（秒）= 3.6 · 长度(米) / 速度(km/h)，速度低于下限时取下限

    Returns:
        tuple: (秒数, 是否触发下限)
    """
    clamped = mu_bar < floor
    return 3.6 * length_m / max(mu_bar, floor), clamped


def export_travel_times(pred, tile_data):
    """为瓦片内每个有像素的路段计算旅行时间

    Returns:
        pd.DataFrame: segment_id, length_m, mu_bar_kmh, travel_seconds, clamped
    """
    if not pred.segment_estimates:
        attach_overlay(pred, tile_data.masks.segment_raster)
    rows = []
    for seg in sorted(tile_data.segments, key=lambda s: s.segment_id):
        estimate = pred.segment_estimates.get(seg.segment_id)
        if estimate is None:
            continue
        length = LineString(seg.polyline).length
        seconds, clamped = travel_time_seconds(length, estimate.mu_bar)
        rows.append({"segment_id": seg.segment_id, "length_m": length, "mu_bar_kmh": estimate.mu_bar,
                     "travel_seconds": seconds, "clamped": clamped})
    table = pd.DataFrame(rows, columns=["segment_id", "length_m", "mu_bar_kmh", "travel_seconds", "clamped"])
    if table["clamped"].any():
        logger.warning("%d 个路段的速度低于 %.1f km/h，旅行时间按下限计算",
                       int(table["clamped"].sum()), MIN_TRAVEL_SPEED_KMH)
    return table


@dataclass
class TimeEmbeddingPCA:
    scores: np.ndarray  # (7, 24, 3)
    components: np.ndarray  # (3, dim)
    explained_variance: np.ndarray  # (3,)


def time_embedding_pca(model, n_components=3):
    """对时间通路在168个时刻上的输出做PCA（协方差矩阵特征分解）

    每个主成分的符号固定为首个元素非负。
    """
    gtpe = getattr(model, "gtpe", None)
    if gtpe is None or gtpe.time_encoder is None:
        raise ConfigError("模型没有启用时间通路，无法可视化时间嵌入")
    days = torch.tensor([d for d, _ in ALL_TIMES])
    hours = torch.tensor([h for _, h in ALL_TIMES])
    device = _model_device(model)
    gtpe.eval()
    with torch.no_grad():
        embedding = gtpe.time_encoder(param_time(days, hours).to(device)).double().cpu().numpy()

    centered = embedding - embedding.mean(axis=0, keepdims=True)
    covariance = centered.T @ centered / (len(centered) - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(eigenvalues)[::-1][:n_components]
    components = eigenvectors[:, order].T
    signs = np.where(components[:, 0] < 0, -1.0, 1.0)
    components = components * signs[:, None]
    scores = centered @ components.T
    return TimeEmbeddingPCA(scores.reshape(7, 24, n_components), components, eigenvalues[order])


@dataclass
class UncertaintyCurve:
    x: np.ndarray
    density: np.ndarray
    mu_bar: float
    sigma_bar: float
    nu: int
    observed: float = None


def uncertainty_curve(model, tile_data, segment_id, day, hour, observed=None, nu=None,
                      max_speed=UNCERTAINTY_MAX_SPEED, step=UNCERTAINTY_STEP):
    """某路段在(day, hour)的Student's t速度分布，在[0, max_speed]上按step采样

    nu默认取该路段在该时刻的观测次数；未观测时必须显式给出。
    """
    segment = _require_segment(tile_data, segment_id)
    obs = segment.observations.get((day, hour))
    if nu is None:
        if obs is None:
            raise NoSupervisionError(f"路段 {segment_id} 在({day}, {hour})没有观测，请指定nu")
        nu = obs[1]
    if observed is None and obs is not None:
        observed = obs[0]

    pred = predict_dense(model, tile_data, day, hour, with_overlay=True)
    estimate = pred.segment_estimates[segment_id]
    n_steps = int(round(max_speed / step))
    x = np.linspace(0.0, max_speed, n_steps + 1)
    density = student_t_pdf(torch.from_numpy(x), float(nu), estimate.mu_bar, estimate.sigma_bar).numpy()
    return UncertaintyCurve(x, density, estimate.mu_bar, estimate.sigma_bar, int(nu), observed)
