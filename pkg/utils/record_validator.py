"""
数据集记录验证工具：检查路段JSONL记录、数据集清单与划分的有效性
"""
import logging
import math

from config import SPLIT_FRACTIONS, SPLIT_TOLERANCE
from utils.exceptions import DatasetFormatError
from utils.georef import Bounds, SegmentRecord

logger = logging.getLogger(__name__)

SEGMENT_KEYS = {"id", "polyline", "observations", "road_class"}
MANIFEST_KEYS = {"city", "region_bounds", "resolution", "tiles"}


def parse_time_key(key):
    """把"d,h"形式的键解析为(day, hour)"""
    parts = key.split(",")
    if len(parts) != 2:
        raise ValueError(f"时间键格式应为\"d,h\"，当前为{key!r}")
    day, hour = int(parts[0]), int(parts[1])
    if not (0 <= day <= 6 and 0 <= hour <= 23):
        raise ValueError(f"时间越界: day={day}, hour={hour}")
    return day, hour


def format_time_key(day, hour):
    return f"{day},{hour}"


class RecordValidator:
    """
    数据集记录验证工具类，把原始JSON对象转换为经过校验的领域对象
    """

    def validate_segment_record(self, raw, tile_id=None, line=None):
        """验证一条路段记录并构造SegmentRecord

        Args:
            raw (dict): JSONL中的一条记录
            tile_id (str, optional): 所在瓦片编号
            line (int, optional): 行号

        Returns:
            SegmentRecord
        """
        if not isinstance(raw, dict):
            raise DatasetFormatError("路段记录必须是JSON对象", tile_id, line)
        missing = {"id", "polyline", "observations"} - set(raw)
        if missing:
            raise DatasetFormatError(f"路段记录缺少字段: {sorted(missing)}", tile_id, line)
        unknown = set(raw) - SEGMENT_KEYS
        if unknown:
            raise DatasetFormatError(f"路段记录包含未知字段: {sorted(unknown)}", tile_id, line)
        if not isinstance(raw["id"], int) or isinstance(raw["id"], bool):
            raise DatasetFormatError(f"路段编号必须是整数: {raw['id']!r}", tile_id, line)
        if not isinstance(raw["observations"], dict):
            raise DatasetFormatError("observations必须是对象", tile_id, line)

        observations = {}
        for key, value in raw["observations"].items():
            try:
                day, hour = parse_time_key(key)
            except ValueError as e:
                raise DatasetFormatError(str(e), tile_id, line)
            if not isinstance(value, list) or len(value) != 2:
                raise DatasetFormatError(f"观测值应为[speed, count]: {value!r}", tile_id, line)
            speed, count = value
            if not isinstance(count, int) or isinstance(count, bool):
                raise DatasetFormatError(f"观测次数必须是整数: {count!r}", tile_id, line)
            if not isinstance(speed, (int, float)) or isinstance(speed, bool):
                raise DatasetFormatError(f"速度必须是数值: {speed!r}", tile_id, line)
            observations[(day, hour)] = (float(speed), count)

        road_class = raw.get("road_class")
        if road_class is not None and not isinstance(road_class, str):
            raise DatasetFormatError("road_class必须是字符串", tile_id, line)
        try:
            return SegmentRecord(raw["id"], raw["polyline"], observations, road_class)
        except DatasetFormatError as e:
            raise DatasetFormatError(str(e), tile_id, line)
        except (TypeError, ValueError) as e:
            raise DatasetFormatError(f"折线无法解析: {e}", tile_id, line)

    def validate_unique_segment_ids(self, segments, tile_id=None):
        seen = set()
        for seg in segments:
            if seg.segment_id in seen:
                raise DatasetFormatError(f"路段编号重复: {seg.segment_id}", tile_id)
            seen.add(seg.segment_id)

    def validate_manifest(self, raw):
        """验证数据集清单的结构与划分

        Returns:
            dict: 原样返回（便于链式调用）
        """
        if not isinstance(raw, dict):
            raise DatasetFormatError("manifest.json必须是JSON对象")
        missing = MANIFEST_KEYS - set(raw)
        if missing:
            raise DatasetFormatError(f"manifest.json缺少字段: {sorted(missing)}")
        tiles = raw["tiles"]
        if not isinstance(tiles, list) or not tiles:
            raise DatasetFormatError("no tiles: 数据集清单中没有任何瓦片")
        resolution = raw["resolution"]
        if not isinstance(resolution, (int, float)) or not math.isfinite(resolution) or resolution <= 0:
            raise DatasetFormatError(f"分辨率无效: {resolution!r}")
        try:
            Bounds.from_dict(raw["region_bounds"])
        except (KeyError, TypeError, ValueError):
            raise DatasetFormatError("region_bounds格式错误")

        splits = {}
        for entry in tiles:
            tile_id = entry.get("id") if isinstance(entry, dict) else None
            if not isinstance(tile_id, str) or not tile_id:
                raise DatasetFormatError(f"瓦片条目缺少有效id: {entry!r}")
            split = entry.get("split")
            if split not in SPLIT_FRACTIONS:
                raise DatasetFormatError(f"未知的划分: {split!r}", tile_id)
            if tile_id in splits and splits[tile_id] != split:
                raise DatasetFormatError(
                    f"瓦片同时出现在 {splits[tile_id]} 与 {split} 两个划分中", tile_id)
            if tile_id in splits:
                raise DatasetFormatError("瓦片在清单中重复出现", tile_id)
            splits[tile_id] = split
            try:
                Bounds.from_dict(entry["bounds"])
            except (KeyError, TypeError, ValueError):
                raise DatasetFormatError("瓦片bounds格式错误", tile_id)
        return raw

    def split_fractions(self, split_of):
        """各划分所占比例

        Args:
            split_of (dict): 瓦片编号 -> 划分名

        Returns:
            dict: 划分名 -> 比例
        """
        total = len(split_of)
        return {name: sum(1 for s in split_of.values() if s == name) / total for name in SPLIT_FRACTIONS}

    def check_split_fractions(self, split_of, tolerance=SPLIT_TOLERANCE):
        """检查划分比例是否在目标比例±tolerance之内

        Returns:
            bool: 是否满足；不满足时记录警告（瓦片很少时无法精确满足）
        """
        fractions = self.split_fractions(split_of)
        ok = all(abs(fractions[name] - target) <= tolerance for name, target in SPLIT_FRACTIONS.items())
        if not ok:
            logger.warning("划分比例 %s 偏离目标 %s 超过 ±%.0f%%",
                           {k: round(v, 3) for k, v in fractions.items()}, SPLIT_FRACTIONS, tolerance * 100)
        return ok
