"""
交通预测可视化模块：稠密预测图、HSV方向图、路段时间序列、时间嵌入假彩色图与速度不确定性曲线
"""
import logging
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.font_manager as fm
import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image

from config import DAY_NAMES, ORIENTATION_BINS

logger = logging.getLogger(__name__)

CHINESE_FONTS = ["SimHei", "Microsoft YaHei", "WenQuanYi Zen Hei", "WenQuanYi Micro Hei",
                 "Noto Sans CJK SC", "Noto Sans SC", "Source Han Sans CN", "Heiti SC"]


def orientation_to_rgb(bins, road_prob=None, k=ORIENTATION_BINS):
    """方向分箱 -> RGB：色相表示方向，亮度表示道路概率

    Returns:
        np.ndarray: (H, W, 3)，取值[0, 1]
    """
    hue = (np.asarray(bins, dtype=np.float64) + 0.5) / k
    value = np.ones_like(hue) if road_prob is None else np.clip(road_prob, 0.0, 1.0)
    hsv = np.stack([np.mod(hue, 1.0), np.ones_like(hue), value], axis=-1)
    return hsv_to_rgb(hsv)


def colorize(array, cmap="viridis", vmin=None, vmax=None):
    """标量图 -> RGB uint8，NaN显示为黑色"""
    data = np.asarray(array, dtype=np.float64)
    finite = np.isfinite(data)
    lo = vmin if vmin is not None else (data[finite].min() if finite.any() else 0.0)
    hi = vmax if vmax is not None else (data[finite].max() if finite.any() else 1.0)
    scaled = np.clip((data - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    rgb = matplotlib.colormaps[cmap](np.where(finite, scaled, 0.0))[..., :3]
    rgb[~finite] = 0.0
    return np.round(rgb * 255).astype(np.uint8)


class TrafficVisualization:
    """
    交通预测可视化类，所有输出都写成PNG文件
    """

    def __init__(self):
        self._setup_chinese_font()
        self.colors = [
            "#E63946",  # 红色调
            "#457B9D",  # 蓝色调
            "#F4A261",  # 橙色调
            "#2A9D8F",  # 绿松石色
            "#264653",  # 深青色
        ]

    def _setup_chinese_font(self):
        """选用系统中可用的中文字体，找不到时退回sans-serif"""
        available = {f.name for f in fm.fontManager.ttflist}
        self.chinese_font = next((name for name in CHINESE_FONTS if name in available), None)
        if self.chinese_font:
            matplotlib.rc("font", family=self.chinese_font)
            logger.debug("使用中文字体: %s", self.chinese_font)
        else:
            matplotlib.rc("font", family="sans-serif")

    def save_prediction_maps(self, pred, output_dir, vmax_speed=None):
        """保存稠密预测的各个图层

        Returns:
            dict: 图层名 -> 文件路径
        """
        os.makedirs(output_dir, exist_ok=True)
        stem = f"{pred.tile_id}_d{pred.day}_h{pred.hour}"
        layers = {
            "mu": colorize(pred.mu, "RdYlGn", 0.0, vmax_speed),
            "sigma": colorize(pred.sigma, "magma"),
            "road": colorize(pred.road_prob, "gray", 0.0, 1.0),
            "orientation": np.round(orientation_to_rgb(pred.orientation_bins, pred.road_prob) * 255).astype(np.uint8),
        }
        if pred.aggregated_mu is not None:
            layers["overlay"] = colorize(pred.aggregated_mu, "RdYlGn", 0.0, vmax_speed)
        paths = {}
        for name, rgb in layers.items():
            path = os.path.join(output_dir, f"{stem}_{name}.png")
            Image.fromarray(rgb).save(path)
            paths[name] = path
        logger.info("已保存 %d 个预测图层到 %s", len(paths), output_dir)
        return paths

    def plot_timeseries(self, table, output_path, title=None):
        """一周168个时刻的路段速度：预测mu_bar±sigma_bar与历史观测"""
        x = table["day"].to_numpy() * 24 + table["hour"].to_numpy()
        fig, ax = plt.subplots(figsize=(14, 4))
        ax.plot(x, table["mu_bar"], color=self.colors[0], label="预测")
        ax.fill_between(x, table["mu_bar"] - table["sigma_bar"], table["mu_bar"] + table["sigma_bar"],
                        color=self.colors[0], alpha=0.2)
        observed = table["observed_speed"].notna().to_numpy()
        ax.scatter(x[observed], table.loc[observed, "observed_speed"], s=10, color=self.colors[3], label="历史数据")
        ax.set_xticks(np.arange(0, 168, 24))
        ax.set_xticklabels(DAY_NAMES)
        ax.set_ylabel("速度 (km/h)")
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        fig.tight_layout()
        fig.savefig(output_path, dpi=150)
        plt.close(fig)
        return output_path

    def plot_time_embedding(self, pca, output_path):
        """把7×24×3的主成分得分按通道归一化为假彩色图"""
        scores = pca.scores
        lo = scores.min(axis=(0, 1), keepdims=True)
        hi = scores.max(axis=(0, 1), keepdims=True)
        rgb = (scores - lo) / np.maximum(hi - lo, 1e-12)
        fig, ax = plt.subplots(figsize=(10, 3.5))
        ax.imshow(rgb, aspect="auto", interpolation="nearest")
        ax.set_yticks(range(7))
        ax.set_yticklabels(DAY_NAMES)
        ax.set_xticks(range(0, 24, 2))
        ax.set_xlabel("小时")
        ax.set_title("时间嵌入（前三个主成分）")
        fig.tight_layout()
        fig.savefig(output_path, dpi=150)
        plt.close(fig)
        return output_path

    def plot_uncertainty(self, curve, output_path):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(curve.x, curve.density, color=self.colors[1])
        ax.axvline(curve.mu_bar, color=self.colors[1], linestyle="--", linewidth=1)
        if curve.observed is not None:
            ax.axvline(curve.observed, color=self.colors[0], linewidth=1.5, label=f"观测 {curve.observed:.1f}")
            ax.legend(loc="best")
        ax.set_xlabel("速度 (km/h)")
        ax.set_ylabel("概率密度")
        ax.set_title(f"μ={curve.mu_bar:.1f}, σ={curve.sigma_bar:.2f}, ν={curve.nu}")
        fig.tight_layout()
        fig.savefig(output_path, dpi=150)
        plt.close(fig)
        return output_path
