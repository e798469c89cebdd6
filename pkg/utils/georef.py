"""
空间数据基础模块：瓦片地理参考、道路几何栅格化、方向标签与速度掩膜生成，以及归一化位置图
"""
import math
from dataclasses import dataclass, field

import numpy as np

from config import ROAD_HALF_WIDTH_M, ORIENTATION_BINS
from utils.exceptions import ConfigError, DatasetFormatError, DegenerateRegionError, DomainError, ShapeError


@dataclass(frozen=True)
class Bounds:
    """Web墨卡托坐标系下的矩形范围（单位：米）"""
    easting_min: float
    easting_max: float
    northing_min: float
    northing_max: float

    @property
    def width(self):
        return self.easting_max - self.easting_min

    @property
    def height(self):
        return self.northing_max - self.northing_min

    def intersects(self, other):
        return (self.easting_min <= other.easting_max and other.easting_min <= self.easting_max
                and self.northing_min <= other.northing_max and other.northing_min <= self.northing_max)

    def union(self, other):
        return Bounds(min(self.easting_min, other.easting_min), max(self.easting_max, other.easting_max),
                      min(self.northing_min, other.northing_min), max(self.northing_max, other.northing_max))

    def to_dict(self):
        return {"easting_min": self.easting_min, "easting_max": self.easting_max,
                "northing_min": self.northing_min, "northing_max": self.northing_max}

    @classmethod
    def from_dict(cls, data):
        return cls(float(data["easting_min"]), float(data["easting_max"]),
                   float(data["northing_min"]), float(data["northing_max"]))


@dataclass
class OverheadTile:
    """带地理参考的RGB俯视影像瓦片

    image为(3, H, W)的float32数组，取值范围[0, 1]；第0行对应北边界。
    """
    id: str
    image: np.ndarray
    bounds: Bounds
    resolution: float

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ShapeError(f"瓦片 {self.id} 的影像形状应为(3, H, W)，当前为{self.image.shape}")
        _, h, w = self.image.shape
        if h != w:
            raise ShapeError(f"瓦片 {self.id} 必须是正方形，当前为{h}×{w}")
        if self.resolution <= 0:
            raise ShapeError(f"瓦片 {self.id} 的分辨率必须为正")
        for extent in (self.bounds.width, self.bounds.height):
            if abs(extent / h - self.resolution) > 1e-6 * self.resolution:
                raise ShapeError(
                    f"瓦片 {self.id} 的范围/像素数({extent / h:.6f})与分辨率({self.resolution})不一致")
        if not np.all(np.isfinite(self.image)) or self.image.min() < 0 or self.image.max() > 1:
            raise ShapeError(f"瓦片 {self.id} 的像素值必须是[0, 1]内的有限值")

    @property
    def size(self):
        return self.image.shape[1]

    def pixel_centers(self):
        """返回每个像素中心的(easting, northing)坐标网格，形状均为(H, W)"""
        n = self.size
        offsets = (np.arange(n, dtype=np.float64) + 0.5) * self.resolution
        eastings = self.bounds.easting_min + offsets
        northings = self.bounds.northing_max - offsets
        return np.meshgrid(eastings, northings)


@dataclass
class SegmentRecord:
    """道路路段：几何形状以及各时刻(day, hour)的平均速度与观测次数"""
    segment_id: int
    polyline: np.ndarray
    observations: dict = field(default_factory=dict)
    road_class: str = None

    def __post_init__(self):
        self.polyline = np.asarray(self.polyline, dtype=np.float64)
        if not isinstance(self.segment_id, (int, np.integer)) or self.segment_id <= 0:
            raise DatasetFormatError(f"路段编号必须是正整数，当前为{self.segment_id!r}")
        if self.polyline.ndim != 2 or self.polyline.shape[1] != 2 or len(self.polyline) < 2:
            raise DatasetFormatError(f"路段 {self.segment_id} 的折线至少需要2个二维点")
        if not np.all(np.isfinite(self.polyline)):
            raise DatasetFormatError(f"路段 {self.segment_id} 的折线包含非有限坐标")
        steps = np.linalg.norm(np.diff(self.polyline, axis=0), axis=1)
        if np.any(steps == 0):
            raise DatasetFormatError(f"路段 {self.segment_id} 的折线存在连续重复点")
        for (d, h), (speed, count) in self.observations.items():
            if not (0 <= d <= 6 and 0 <= h <= 23):
                raise DatasetFormatError(f"路段 {self.segment_id} 的观测时间越界: ({d}, {h})")
            if not math.isfinite(speed) or speed < 0:
                raise DatasetFormatError(f"路段 {self.segment_id} 在({d}, {h})的速度无效: {speed}")
            if int(count) != count or count < 1:
                raise DatasetFormatError(f"路段 {self.segment_id} 在({d}, {h})的观测次数无效: {count}")

    def observed_times(self):
        return set(self.observations.keys())


@dataclass
class LabelMasks:
    """瓦片的静态标注：路段编号栅格、道路掩膜、方向分箱（-1表示不监督）"""
    segment_raster: np.ndarray
    road_mask: np.ndarray
    orientation_bins: np.ndarray = None


@dataclass
class GeoTemporalContext:
    """稠密归一化位置图加上(day, hour)时间戳"""
    location_map: np.ndarray
    day: int
    hour: int


def make_location_map(tile, region_bounds):
    """生成瓦片的归一化位置图

    位置图按瓦片边界从一端采样到另一端，因此与区域重合的瓦片角点恰好为(±1, ±1)。

    Args:
        tile (OverheadTile): 输入瓦片
        region_bounds (Bounds): 城市区域范围（来自数据集元信息）

    Returns:
        np.ndarray: (2, H, W)的float32数组，通道0为easting，通道1为northing
    """
    if region_bounds.width <= 0 or region_bounds.height <= 0:
        raise DegenerateRegionError(f"区域范围退化: {region_bounds}")
    if not tile.bounds.intersects(region_bounds):
        raise DegenerateRegionError(f"瓦片 {tile.id} 与区域范围不相交")

    n = tile.size
    mid_e = (region_bounds.easting_min + region_bounds.easting_max) / 2
    mid_n = (region_bounds.northing_min + region_bounds.northing_max) / 2
    half_e = region_bounds.width / 2
    half_n = region_bounds.height / 2

    eastings = np.linspace(tile.bounds.easting_min, tile.bounds.easting_max, n)
    # 第0行在北边
    northings = np.linspace(tile.bounds.northing_max, tile.bounds.northing_min, n)
    x = (eastings - mid_e) / half_e
    y = (northings - mid_n) / half_n

    location = np.empty((2, n, n), dtype=np.float32)
    location[0] = x[None, :]
    location[1] = y[:, None]
    return location


def _point_segment_distance(px, py, ax, ay, bx, by):
    """点到线段的距离，同时返回投影参数t∈[0, 1]"""
    dx, dy = bx - ax, by - ay
    length_sq = dx * dx + dy * dy
    if length_sq == 0:
        t = np.zeros_like(px)
    else:
        t = np.clip(((px - ax) * dx + (py - ay) * dy) / length_sq, 0.0, 1.0)
    cx = ax + t * dx
    cy = ay + t * dy
    return np.hypot(px - cx, py - cy)


def polyline_distance(px, py, polyline):
    """点集到折线的最短距离以及最近折线片段的索引

    Args:
        px, py (np.ndarray): 点坐标（任意相同形状）
        polyline (np.ndarray): (N, 2)折线顶点

    Returns:
        tuple: (distance, piece_index)
    """
    best = np.full(px.shape, np.inf)
    piece = np.zeros(px.shape, dtype=np.int64)
    for k in range(len(polyline) - 1):
        (ax, ay), (bx, by) = polyline[k], polyline[k + 1]
        dist = _point_segment_distance(px, py, ax, ay, bx, by)
        closer = dist < best
        best = np.where(closer, dist, best)
        piece = np.where(closer, k, piece)
    return best, piece


def _pixel_window(tile, polyline, margin):
    """折线外扩margin后覆盖的像素行列范围，返回None表示在瓦片之外"""
    n = tile.size
    res = tile.resolution
    e_lo, n_lo = polyline.min(axis=0) - margin
    e_hi, n_hi = polyline.max(axis=0) + margin
    col0 = max(int(math.floor((e_lo - tile.bounds.easting_min) / res)) - 1, 0)
    col1 = min(int(math.ceil((e_hi - tile.bounds.easting_min) / res)) + 1, n)
    row0 = max(int(math.floor((tile.bounds.northing_max - n_hi) / res)) - 1, 0)
    row1 = min(int(math.ceil((tile.bounds.northing_max - n_lo) / res)) + 1, n)
    if col0 >= col1 or row0 >= row1:
        return None
    return row0, row1, col0, col1


def rasterize_segments(segments, tile, half_width=ROAD_HALF_WIDTH_M):
    """将路段折线按给定半宽缓冲后栅格化

    像素中心到某条折线的距离 <= half_width 即为道路像素；
    多条折线重叠时取最近的一条，距离相同则取编号最小者。

    Args:
        segments (list): SegmentRecord列表
        tile (OverheadTile): 目标瓦片
        half_width (float): 缓冲半宽（米）

    Returns:
        LabelMasks: 只包含segment_raster与road_mask
    """
    if half_width <= 0:
        raise ConfigError("half_width必须为正")
    n = tile.size
    segment_raster = np.zeros((n, n), dtype=np.int64)
    best = np.full((n, n), np.inf)
    ee, nn_ = tile.pixel_centers()

    for seg in sorted(segments, key=lambda s: s.segment_id):
        window = _pixel_window(tile, seg.polyline, half_width)
        if window is None:
            continue
        r0, r1, c0, c1 = window
        dist, _ = polyline_distance(ee[r0:r1, c0:c1], nn_[r0:r1, c0:c1], seg.polyline)
        # 严格小于：距离相同时保留编号更小（先处理）的路段
        take = (dist <= half_width) & (dist < best[r0:r1, c0:c1])
        best[r0:r1, c0:c1] = np.where(take, dist, best[r0:r1, c0:c1])
        segment_raster[r0:r1, c0:c1] = np.where(take, seg.segment_id, segment_raster[r0:r1, c0:c1])

    road_mask = (segment_raster != 0).astype(np.uint8)
    return LabelMasks(segment_raster=segment_raster, road_mask=road_mask)


def bearing_degrees(dx, dy):
    """从正东方向逆时针量的方位角，范围[0, 360)"""
    return np.mod(np.degrees(np.arctan2(dy, dx)), 360.0)


def bearing_to_bin(theta, k=ORIENTATION_BINS):
    width = 360.0 / k
    # 容差用于吸收恰好落在分箱边界上的浮点误差
    return np.mod(np.floor((np.asarray(theta) + 1e-9) / width), k).astype(np.int64)


def bin_bearing(bins, k=ORIENTATION_BINS):
    """方向分箱对应的代表方位角 k·360/K（度）"""
    return np.asarray(bins, dtype=np.float64) * (360.0 / k)


def orientation_labels(segments, segment_raster, tile, k=ORIENTATION_BINS):
    """为每个道路像素生成行驶方向分箱标签

    方向取该像素所属路段上最近折线片段的方位（按数字化顺序），背景像素为-1。

    Args:
        segments (list): SegmentRecord列表
        segment_raster (np.ndarray): rasterize_segments生成的路段编号栅格
        tile (OverheadTile): 提供像素中心坐标
        k (int): 角度分箱数

    Returns:
        np.ndarray: (H, W)的int64数组
    """
    if k < 2:
        raise ConfigError("k必须 >= 2")
    bins = np.full(segment_raster.shape, -1, dtype=np.int64)
    ee, nn_ = tile.pixel_centers()
    by_id = {s.segment_id: s for s in segments}

    for seg_id in np.unique(segment_raster):
        if seg_id == 0:
            continue
        seg = by_id.get(int(seg_id))
        if seg is None:
            raise ShapeError(f"路段编号栅格中的编号 {seg_id} 不在路段列表中")
        mask = segment_raster == seg_id
        _, piece = polyline_distance(ee[mask], nn_[mask], seg.polyline)
        deltas = np.diff(seg.polyline, axis=0)
        dx, dy = deltas[piece, 0], deltas[piece, 1]
        degenerate = (dx == 0) & (dy == 0)
        if np.any(degenerate):
            chord = seg.polyline[-1] - seg.polyline[0]
            dx = np.where(degenerate, chord[0], dx)
            dy = np.where(degenerate, chord[1], dy)
        bins[mask] = bearing_to_bin(bearing_degrees(dx, dy), k)
    return bins


def build_label_masks(segments, tile, half_width=ROAD_HALF_WIDTH_M, k=ORIENTATION_BINS):
    """一次生成完整的静态标注（路段栅格、道路掩膜、方向分箱）"""
    masks = rasterize_segments(segments, tile, half_width)
    masks.orientation_bins = orientation_labels(segments, masks.segment_raster, tile, k)
    return masks


def make_speed_mask(segment_raster, segments, day, hour):
    """根据(day, hour)动态生成速度掩膜

    Args:
        segment_raster (np.ndarray): 路段编号栅格
        segments (list): SegmentRecord列表
        day (int): 星期（0=周一）
        hour (int): 小时

    Returns:
        tuple: (speed, count, valid)，分别为float32、int64、uint8栅格
    """
    if not (0 <= day <= 6 and 0 <= hour <= 23):
        raise DomainError(f"时间越界: ({day}, {hour})")
    speed = np.zeros(segment_raster.shape, dtype=np.float32)
    count = np.zeros(segment_raster.shape, dtype=np.int64)
    valid = np.zeros(segment_raster.shape, dtype=np.uint8)
    for seg in segments:
        obs = seg.observations.get((day, hour))
        if obs is None:
            continue
        mask = segment_raster == seg.segment_id
        speed[mask] = obs[0]
        count[mask] = obs[1]
        valid[mask] = 1
    return speed, count, valid
