"""
数据格式转换工具类：把表格形式的DTS导出转换为本项目的规范数据集目录
"""
import logging
import os

import numpy as np
import pandas as pd
from shapely import wkt
from shapely.errors import ShapelyError

from utils.dataset_io import DatasetManifest, TileEntry, assign_splits, load_tile_image, write_dataset
from utils.exceptions import DatasetFormatError
from utils.georef import Bounds, OverheadTile, SegmentRecord

logger = logging.getLogger(__name__)

TILE_COLUMNS = ["tile_id", "image", "easting_min", "easting_max", "northing_min", "northing_max"]
SEGMENT_COLUMNS = ["tile_id", "segment_id", "geometry"]
OBSERVATION_COLUMNS = ["segment_id", "day", "hour", "speed", "count"]


class DtsConverter:
    """
    DTS导出转换工具类

    输入三张表：
        tiles.csv         tile_id, image（相对路径的PNG）, easting_min, easting_max, northing_min, northing_max
        segments.csv      tile_id, segment_id, geometry（WKT LINESTRING，Web墨卡托米）, 可选road_class
        observations.csv  segment_id, day, hour, speed, count

    一个路段可以出现在多个瓦片中（每个瓦片一行），不做跨瓦片去重。
    """

    def __init__(self, city="dts", seed=0):
        self.city = city
        self.seed = seed

    def _read_table(self, path, columns):
        try:
            table = pd.read_csv(path)
        except FileNotFoundError:
            raise DatasetFormatError(f"找不到表格: {path}")
        missing = [c for c in columns if c not in table.columns]
        if missing:
            raise DatasetFormatError(f"{os.path.basename(path)} 缺少列: {missing}")
        return table

    def parse_geometry(self, text, tile_id=None, line=None):
        """WKT LINESTRING -> (N, 2)坐标数组"""
        try:
            geometry = wkt.loads(text)
        except (ShapelyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"几何无法解析: {e}", tile_id, line)
        if geometry.geom_type != "LineString":
            raise DatasetFormatError(f"几何类型必须是LineString，当前为{geometry.geom_type}", tile_id, line)
        return np.asarray(geometry.coords, dtype=np.float64)[:, :2]

    def group_observations(self, table):
        """observations表 -> {segment_id: {(day, hour): (speed, count)}}"""
        grouped = {}
        for row in table.itertuples(index=False):
            obs = grouped.setdefault(int(row.segment_id), {})
            obs[(int(row.day), int(row.hour))] = (float(row.speed), int(row.count))
        return grouped

    def to_dataset(self, tiles_csv, segments_csv, observations_csv):
        """读取三张表并构造内存中的数据集

        Returns:
            tuple: (DatasetManifest, tiles, segments)
        """
        tile_table = self._read_table(tiles_csv, TILE_COLUMNS)
        segment_table = self._read_table(segments_csv, SEGMENT_COLUMNS)
        observations = self.group_observations(self._read_table(observations_csv, OBSERVATION_COLUMNS))
        if tile_table.empty:
            raise DatasetFormatError("no tiles: tiles.csv为空")

        base_dir = os.path.dirname(os.path.abspath(tiles_csv))
        tiles, region, resolution = {}, None, None
        for row in tile_table.itertuples(index=False):
            tile_id = str(row.tile_id)
            bounds = Bounds(float(row.easting_min), float(row.easting_max),
                            float(row.northing_min), float(row.northing_max))
            image = load_tile_image(os.path.join(base_dir, str(row.image)), tile_id)
            tile_resolution = bounds.width / image.shape[1]
            if resolution is None:
                resolution = tile_resolution
            elif abs(tile_resolution - resolution) > 1e-6 * resolution:
                raise DatasetFormatError("所有瓦片必须使用相同的分辨率", tile_id)
            try:
                tiles[tile_id] = OverheadTile(tile_id, image, bounds, resolution)
            except ValueError as e:
                raise DatasetFormatError(str(e), tile_id)
            region = bounds if region is None else region.union(bounds)

        segments = {tile_id: [] for tile_id in tiles}
        # 表头占第1行
        for lineno, row in enumerate(segment_table.itertuples(index=False), start=2):
            tile_id = str(row.tile_id)
            if tile_id not in segments:
                raise DatasetFormatError(f"segments.csv引用了不存在的瓦片 {tile_id}", tile_id, lineno)
            polyline = self.parse_geometry(row.geometry, tile_id, lineno)
            road_class = getattr(row, "road_class", None)
            if road_class is not None and pd.isna(road_class):
                road_class = None
            try:
                segments[tile_id].append(SegmentRecord(
                    int(row.segment_id), polyline, dict(observations.get(int(row.segment_id), {})),
                    None if road_class is None else str(road_class)))
            except DatasetFormatError as e:
                raise DatasetFormatError(str(e), tile_id, lineno)

        splits = assign_splits(list(tiles), self.seed)
        entries = [TileEntry(t, tiles[t].bounds, splits[t]) for t in tiles]
        manifest = DatasetManifest(self.city, region, resolution, entries, self.seed)
        return manifest, tiles, segments

    def convert(self, tiles_csv, segments_csv, observations_csv, output_dir):
        manifest, tiles, segments = self.to_dataset(tiles_csv, segments_csv, observations_csv)
        write_dataset(output_dir, manifest, tiles, segments)
        logger.info("DTS导出已转换到 %s：%d 个瓦片，%d 条路段记录",
                    output_dir, len(tiles), sum(len(s) for s in segments.values()))
        return manifest
