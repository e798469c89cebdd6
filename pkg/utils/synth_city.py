"""
合成城市数据集生成器：网格加对角线路网、按道路等级渲染的影像、带日周期与稀疏观测的速度真值
"""
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field, replace

import networkx as nx
import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from utils.dataset_io import (DatasetManifest, TileEntry, assign_splits, write_dataset,
                              MANIFEST_FILE, IMAGE_FILE, SEGMENTS_FILE)
from utils.exceptions import ConfigError
from utils.georef import Bounds, OverheadTile, SegmentRecord

logger = logging.getLogger(__name__)

ROAD_CLASSES = ("highway", "arterial", "residential")

# 渲染参数：道路宽度（像素）与灰度，等级越高越宽越亮
ROAD_STYLE = {
    "highway": (7, 225),
    "arterial": (5, 175),
    "residential": (3, 120),
}


@dataclass(frozen=True)
class SynthSpec:
    """合成城市的生成参数

    速度真值 y(s, d, h) = base(class) · diurnal(d, h) · daytype(d) · spatial(easting) + offset + noise
    """
    seed: int = 0
    city: str = "A"
    tiles: int = 8
    grid_size: int = 4  # 每个瓦片内每个方向的道路条数
    image_size: int = 256
    resolution: float = 1.2
    origin: tuple = (0.0, 0.0)  # 区域西南角（Web墨卡托，米）
    class_speeds: dict = field(default_factory=lambda: {"highway": 80.0, "arterial": 55.0, "residential": 30.0})
    diurnal_amplitude: float = 0.35
    rush_hours: tuple = (8, 17)
    rush_width: float = 1.5
    weekend_factor: float = 1.1
    weekend_rush_scale: float = 0.3
    spatial_gradient: float = 0.15
    speed_offset: float = 0.0
    noise_sigma: float = 2.0
    observation_prob: float = 0.5
    count_mean: float = 6.0
    diagonal_prob: float = 0.5

    def __post_init__(self):
        if self.tiles < 1 or self.grid_size < 2 or self.image_size < 32:
            raise ConfigError("tiles >= 1、grid_size >= 2、image_size >= 32")
        if self.resolution <= 0 or self.noise_sigma < 0 or self.count_mean < 1:
            raise ConfigError("resolution必须为正，noise_sigma不能为负，count_mean >= 1")
        if not 0 < self.observation_prob <= 1:
            raise ConfigError("observation_prob需在(0, 1]内")
        if set(self.class_speeds) != set(ROAD_CLASSES):
            raise ConfigError(f"class_speeds必须覆盖全部道路等级 {ROAD_CLASSES}")

    @property
    def tile_extent(self):
        return self.image_size * self.resolution


def second_city(spec, offset=10.0):
    """由城市A派生城市B：整体速度偏移并改变日周期形状"""
    return replace(spec, city="B", seed=spec.seed + 1000, speed_offset=offset,
                   rush_hours=(7, 18), diurnal_amplitude=spec.diurnal_amplitude * 1.5,
                   origin=(spec.origin[0] + 1.0e5, spec.origin[1]))


def diurnal(spec, day, hour):
    """日周期因子：工作日早晚高峰降速，周末高峰减弱"""
    scale = spec.weekend_rush_scale if day >= 5 else 1.0
    dip = sum(math.exp(-((hour - c) ** 2) / (2 * spec.rush_width ** 2)) for c in spec.rush_hours)
    return 1.0 - spec.diurnal_amplitude * scale * min(dip, 1.0)


def daytype(spec, day):
    return spec.weekend_factor if day >= 5 else 1.0


def spatial(spec, easting, region_bounds):
    mid = (region_bounds.easting_min + region_bounds.easting_max) / 2
    x = (easting - mid) / (region_bounds.width / 2)
    return 1.0 + spec.spatial_gradient * x


def expected_speed(spec, road_class, day, hour, easting, region_bounds):
    """不含噪声的生成公式"""
    return (spec.class_speeds[road_class] * diurnal(spec, day, hour) * daytype(spec, day)
            * spatial(spec, easting, region_bounds) + spec.speed_offset)


def tile_layout(spec):
    """瓦片在区域内按近似正方形排布

    Returns:
        tuple: ([(tile_id, Bounds)], 区域Bounds)
    """
    cols = math.ceil(math.sqrt(spec.tiles))
    rows = math.ceil(spec.tiles / cols)
    extent = spec.tile_extent
    e0, n0 = spec.origin
    layout = []
    for i in range(spec.tiles):
        r, c = divmod(i, cols)
        e_min = e0 + c * extent
        n_max = n0 + (rows - r) * extent
        layout.append((f"{spec.city.lower()}{i:03d}", Bounds(e_min, e_min + extent, n_max - extent, n_max)))
    region = Bounds(e0, e0 + cols * extent, n0, n0 + rows * extent)
    return layout, region


def road_network(spec, bounds, rng):
    """瓦片内的道路图：grid_size×grid_size网格节点，外加随机的对角线

    Returns:
        nx.Graph: 节点属性pos为(easting, northing)，边属性road_class
    """
    g = spec.grid_size
    spacing = spec.tile_extent / g
    graph = nx.grid_2d_graph(g, g)
    jitter = spacing * 0.15
    for i, j in graph.nodes:
        e = bounds.easting_min + (i + 0.5) * spacing + rng.uniform(-jitter, jitter)
        n = bounds.northing_min + (j + 0.5) * spacing + rng.uniform(-jitter, jitter)
        graph.nodes[(i, j)]["pos"] = (e, n)

    middle = g // 2
    for u, v in graph.edges:
        # 水平线沿j不变，竖直线沿i不变
        line = u[1] if u[1] == v[1] else u[0]
        if line == middle:
            graph.edges[u, v]["road_class"] = "highway"
        elif line % 2 == 0:
            graph.edges[u, v]["road_class"] = "arterial"
        else:
            graph.edges[u, v]["road_class"] = "residential"

    for i in range(g - 1):
        for j in range(g - 1):
            if rng.random() < spec.diagonal_prob:
                u, v = ((i, j), (i + 1, j + 1)) if rng.random() < 0.5 else ((i + 1, j), (i, j + 1))
                graph.add_edge(u, v, road_class="residential")
    return graph


def network_segments(spec, graph, rng):
    """每条边生成一个路段，方向随机，中点加一个折点"""
    segments = []
    for seg_id, (u, v) in enumerate(sorted(graph.edges), start=1):
        a = np.asarray(graph.nodes[u]["pos"])
        b = np.asarray(graph.nodes[v]["pos"])
        if rng.random() < 0.5:
            a, b = b, a
        polyline = np.stack([a, (a + b) / 2, b])
        segments.append(SegmentRecord(seg_id, polyline, {}, graph.edges[u, v]["road_class"]))
    return segments


def simulate_observations(spec, segments, region_bounds, rng):
    """为每个路段生成稀疏的(day, hour)观测；观测次数 >= 1，噪声随观测次数缩小"""
    for seg in segments:
        easting = float(seg.polyline[:, 0].mean())
        observations = {}
        for day in range(7):
            for hour in range(24):
                if rng.random() >= spec.observation_prob:
                    continue
                count = 1 + int(rng.poisson(spec.count_mean - 1))
                mean = expected_speed(spec, seg.road_class, day, hour, easting, region_bounds)
                noise = rng.normal(0.0, spec.noise_sigma / math.sqrt(count))
                observations[(day, hour)] = (max(round(mean + noise, 3), 0.5), count)
        seg.observations = observations
    return segments


def render_tile(spec, bounds, segments, rng):
    """渲染俯视影像：带纹理的背景上按道路等级画出不同宽度与亮度的道路"""
    n = spec.image_size
    base = rng.normal(0.0, 1.0, size=(n, n, 3))
    texture = Image.fromarray(np.clip(90 + 18 * base, 0, 255).astype(np.uint8))
    texture = texture.filter(ImageFilter.GaussianBlur(radius=2))
    tint = np.asarray(texture, dtype=np.float64) * np.array([0.8, 1.0, 0.75])
    canvas = Image.fromarray(np.clip(tint, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)

    order = {c: i for i, c in enumerate(reversed(ROAD_CLASSES))}
    for seg in sorted(segments, key=lambda s: (order[s.road_class], s.segment_id)):
        width, gray = ROAD_STYLE[seg.road_class]
        points = [((e - bounds.easting_min) / spec.resolution - 0.5,
                   (bounds.northing_max - nn) / spec.resolution - 0.5) for e, nn in seg.polyline]
        draw.line(points, fill=(gray, gray, gray), width=width, joint="curve")

    pixels = np.asarray(canvas, dtype=np.float64)
    pixels = np.clip(pixels + rng.normal(0.0, 3.0, size=pixels.shape), 0, 255)
    return np.round(pixels).astype(np.uint8).transpose(2, 0, 1).astype(np.float32) / 255.0


def generate_city(spec):
    """在内存中生成整个合成城市

    Returns:
        tuple: (DatasetManifest, {tile_id: OverheadTile}, {tile_id: [SegmentRecord]})
    """
    rng = np.random.default_rng(spec.seed)
    layout, region = tile_layout(spec)
    splits = assign_splits([tile_id for tile_id, _ in layout], spec.seed)

    tiles, segments, entries = {}, {}, []
    for tile_id, bounds in layout:
        graph = road_network(spec, bounds, rng)
        segs = simulate_observations(spec, network_segments(spec, graph, rng), region, rng)
        image = render_tile(spec, bounds, segs, rng)
        tiles[tile_id] = OverheadTile(tile_id, image, bounds, spec.resolution)
        segments[tile_id] = segs
        entries.append(TileEntry(tile_id, bounds, splits[tile_id]))

    manifest = DatasetManifest(spec.city, region, spec.resolution, entries, spec.seed)
    return manifest, tiles, segments


def synth_city(spec, root):
    """生成合成城市并写到root

    Returns:
        DatasetManifest
    """
    manifest, tiles, segments = generate_city(spec)
    write_dataset(root, manifest, tiles, segments)
    n_segments = sum(len(s) for s in segments.values())
    n_cells = sum(len(seg.observations) for segs in segments.values() for seg in segs)
    logger.info("合成城市 %s：%d 个瓦片，%d 个路段，观测单元占比 %.1f%%",
                spec.city, len(tiles), n_segments, 100.0 * n_cells / max(n_segments * 168, 1))
    return manifest


def dataset_checksum(root):
    """按固定顺序对数据集全部文件求sha256"""
    digest = hashlib.sha256()
    manifest_path = os.path.join(root, MANIFEST_FILE)
    with open(manifest_path, "rb") as f:
        digest.update(f.read())
    for tile_id in sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))):
        for name in (IMAGE_FILE, SEGMENTS_FILE):
            path = os.path.join(root, tile_id, name)
            if os.path.exists(path):
                with open(path, "rb") as f:
                    digest.update(f.read())
    return digest.hexdigest()
