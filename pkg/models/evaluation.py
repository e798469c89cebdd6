"""
评估模块：路段级速度指标（RMSE/MAE/R²）、微观与宏观评估协议，以及道路F1与方向准确率
"""
import logging
from dataclasses import dataclass, field, asdict

import numpy as np
import pandas as pd

from config import DEFAULT_MACRO_TIMES, DAY_NAMES
from models.applications import predict_dense
from utils.exceptions import NoSupervisionError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    """评估结果；r2在真值方差为0时为None"""
    rmse: float
    mae: float
    r2: float = None
    n_pairs: int = 0
    road_f1: float = None
    orientation_accuracy: float = None
    per_time: list = field(default_factory=list)
    dropped_times: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def per_time_table(self):
        columns = ["day", "hour", "day_name", "rmse", "mae", "r2", "n_pairs", "n_images"]
        return pd.DataFrame(self.per_time, columns=columns)


def compute_metrics(predictions, truths):
    """路段级速度指标

    Args:
        predictions: 预测的mu_bar序列
        truths: 对应的真值速度序列

    Returns:
        MetricsReport
    """
    pred = np.asarray(predictions, dtype=np.float64)
    true = np.asarray(truths, dtype=np.float64)
    if pred.shape != true.shape:
        raise ShapeError("预测与真值数量不一致")
    if pred.size == 0:
        raise NoSupervisionError("没有任何可评估的路段")
    residual = true - pred
    rmse = float(np.sqrt(np.mean(residual ** 2)))
    mae = float(np.mean(np.abs(residual)))
    ss_tot = float(np.sum((true - true.mean()) ** 2))
    r2 = None if ss_tot == 0 else 1.0 - float(np.sum(residual ** 2)) / ss_tot
    return MetricsReport(rmse=rmse, mae=mae, r2=r2, n_pairs=int(pred.size))


class _AuxiliaryCounter:
    """道路F1与方向准确率的像素级累计"""

    def __init__(self):
        self.tp = self.fp = self.fn = 0
        self.correct = self.supervised = 0

    def update(self, pred, masks):
        road_pred = pred.road_prob > 0.5
        road_true = masks.road_mask.astype(bool)
        self.tp += int(np.sum(road_pred & road_true))
        self.fp += int(np.sum(road_pred & ~road_true))
        self.fn += int(np.sum(~road_pred & road_true))
        supervised = masks.orientation_bins >= 0
        self.correct += int(np.sum(pred.orientation_bins[supervised] == masks.orientation_bins[supervised]))
        self.supervised += int(supervised.sum())

    def road_f1(self):
        denominator = 2 * self.tp + self.fp + self.fn
        return None if denominator == 0 else 2 * self.tp / denominator

    def orientation_accuracy(self):
        return None if self.supervised == 0 else self.correct / self.supervised


def segment_pairs(pred, tile_data):
    """(预测mu_bar, 真值速度)对：只包含在该时刻有观测且在瓦片内有像素的路段"""
    pairs = []
    for seg in sorted(tile_data.segments, key=lambda s: s.segment_id):
        obs = seg.observations.get((pred.day, pred.hour))
        estimate = pred.segment_estimates.get(seg.segment_id)
        if obs is None or estimate is None:
            continue
        pairs.append((estimate.mu_bar, obs[0]))
    return pairs


def evaluate_micro(model, tiles, seed=0):
    """微观评估：每个测试瓦片按seed采样一个已观测时刻，全部路段对汇总后统一计算指标

    Args:
        model (nn.Module): 待评估模型
        tiles (list): TileData列表
        seed (int): 时间采样种子

    Returns:
        MetricsReport
    """
    if not tiles:
        raise NoSupervisionError("评估集合中没有瓦片")
    rng = np.random.default_rng(seed)
    counter = _AuxiliaryCounter()
    pairs = []
    for tile_data in tiles:
        if not tile_data.observed_times:
            logger.debug("瓦片 %s 没有观测，跳过", tile_data.id)
            continue
        day, hour = tile_data.observed_times[int(rng.integers(len(tile_data.observed_times)))]
        pred = predict_dense(model, tile_data, day, hour, with_overlay=True)
        pairs.extend(segment_pairs(pred, tile_data))
        counter.update(pred, tile_data.masks)
    if not pairs:
        raise NoSupervisionError("评估集合中没有任何有观测的路段")
    report = compute_metrics([p for p, _ in pairs], [t for _, t in pairs])
    report.road_f1 = counter.road_f1()
    report.orientation_accuracy = counter.orientation_accuracy()
    return report


def evaluate_macro(model, tiles, times=DEFAULT_MACRO_TIMES):
    """宏观评估：对每个固定时刻分别计算指标，再对各时刻等权平均

    某时刻没有任何有观测的瓦片时跳过，并记录在dropped_times中。R²对各时刻取平均（忽略未定义的时刻）。

    Returns:
        MetricsReport: per_time为逐时刻的明细
    """
    if not tiles:
        raise NoSupervisionError("评估集合中没有瓦片")
    counter = _AuxiliaryCounter()
    rows, dropped = [], []
    for day, hour in times:
        eligible = [t for t in tiles if (day, hour) in t.observed_times]
        if not eligible:
            dropped.append((day, hour))
            logger.warning("时刻 %s %d点 没有可评估的瓦片，已跳过", DAY_NAMES[day], hour)
            continue
        pairs = []
        for tile_data in eligible:
            pred = predict_dense(model, tile_data, day, hour, with_overlay=True)
            pairs.extend(segment_pairs(pred, tile_data))
            counter.update(pred, tile_data.masks)
        metrics = compute_metrics([p for p, _ in pairs], [t for _, t in pairs])
        rows.append({"day": day, "hour": hour, "day_name": DAY_NAMES[day], "rmse": metrics.rmse,
                     "mae": metrics.mae, "r2": metrics.r2, "n_pairs": metrics.n_pairs,
                     "n_images": len(eligible)})
    if not rows:
        raise NoSupervisionError("所有评估时刻都没有可评估的瓦片")

    r2_values = [r["r2"] for r in rows if r["r2"] is not None]
    return MetricsReport(
        rmse=float(np.mean([r["rmse"] for r in rows])),
        mae=float(np.mean([r["mae"] for r in rows])),
        r2=float(np.mean(r2_values)) if r2_values else None,
        n_pairs=sum(r["n_pairs"] for r in rows),
        road_f1=counter.road_f1(),
        orientation_accuracy=counter.orientation_accuracy(),
        per_time=rows,
        dropped_times=dropped,
    )
