"""
数据集读写：清单、瓦片影像、路段JSONL，划分分配以及训练时的动态时间采样

目录结构::

    <root>/manifest.json
    <root>/<tile_id>/image.png        8位RGB
    <root>/<tile_id>/segments.jsonl   每行一个路段
"""
import hashlib
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset, DataLoader, default_collate

from config import SPLIT_FRACTIONS, ORIENTATION_BINS, ROAD_HALF_WIDTH_M
from utils.exceptions import DatasetFormatError, NoSupervisionError
from utils.georef import (Bounds, OverheadTile, GeoTemporalContext, build_label_masks,
                          make_location_map, make_speed_mask)
from utils.json_handler import JsonHandler
from utils.record_validator import RecordValidator, format_time_key

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
IMAGE_FILE = "image.png"
SEGMENTS_FILE = "segments.jsonl"


@dataclass
class TileEntry:
    id: str
    bounds: Bounds
    split: str


@dataclass
class DatasetManifest:
    """数据集元信息：城市、区域范围、分辨率与瓦片划分"""
    city: str
    region_bounds: Bounds
    resolution: float
    tiles: list = field(default_factory=list)
    seed: int = 0

    def split_of(self):
        return {t.id: t.split for t in self.tiles}

    def tile_ids(self, split=None):
        return [t.id for t in self.tiles if split is None or t.split == split]

    def to_dict(self):
        return {
            "city": self.city,
            "region_bounds": self.region_bounds.to_dict(),
            "resolution": self.resolution,
            "seed": self.seed,
            "tiles": [{"id": t.id, "bounds": t.bounds.to_dict(), "split": t.split} for t in self.tiles],
        }

    @classmethod
    def from_dict(cls, data):
        RecordValidator().validate_manifest(data)
        tiles = [TileEntry(t["id"], Bounds.from_dict(t["bounds"]), t["split"]) for t in data["tiles"]]
        return cls(str(data["city"]), Bounds.from_dict(data["region_bounds"]),
                   float(data["resolution"]), tiles, int(data.get("seed", 0)))


def assign_splits(tile_ids, seed=0):
    """按哈希排序把瓦片分到train/val/test（85/5/10）

    划分只由(瓦片编号, seed)决定；瓦片数 >= 3 时val与test至少各有一个瓦片。

    Returns:
        dict: 瓦片编号 -> 划分名
    """
    ranked = sorted(tile_ids, key=lambda t: hashlib.sha256(f"{seed}:{t}".encode("utf-8")).hexdigest())
    n = len(ranked)
    n_val = round(n * SPLIT_FRACTIONS["val"])
    n_test = round(n * SPLIT_FRACTIONS["test"])
    if n >= 3:
        n_val = max(n_val, 1)
        n_test = max(n_test, 1)
    n_train = n - n_val - n_test
    splits = {}
    for i, tile_id in enumerate(ranked):
        if i < n_train:
            splits[tile_id] = "train"
        elif i < n_train + n_val:
            splits[tile_id] = "val"
        else:
            splits[tile_id] = "test"
    return splits


def load_tile_image(path, tile_id=None):
    """读取8位RGB PNG，返回(3, H, W)的float32数组，取值[0, 1]"""
    try:
        with Image.open(path) as img:
            if img.mode != "RGB":
                raise DatasetFormatError(f"影像必须是8位RGB，当前模式为{img.mode}", tile_id)
            array = np.asarray(img, dtype=np.uint8)
    except FileNotFoundError:
        raise DatasetFormatError(f"找不到影像文件: {path}", tile_id)
    except OSError as e:
        raise DatasetFormatError(f"影像无法读取: {e}", tile_id)
    return (array.transpose(2, 0, 1).astype(np.float32) / 255.0)


def save_tile_image(image, path):
    array = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Image.fromarray(array).save(path)


def segment_to_record(segment):
    """SegmentRecord -> JSONL记录；观测按(day, hour)排序，保证序列化结果确定"""
    record = {
        "id": int(segment.segment_id),
        "polyline": [[float(e), float(n)] for e, n in segment.polyline],
        "observations": {
            format_time_key(d, h): [float(speed), int(count)]
            for (d, h), (speed, count) in sorted(segment.observations.items())
        },
    }
    if segment.road_class is not None:
        record["road_class"] = segment.road_class
    return record


def load_segments(path, tile_id=None):
    handler = JsonHandler()
    validator = RecordValidator()
    segments = [validator.validate_segment_record(raw, tile_id, lineno)
                for lineno, raw in handler.iter_jsonl(path, tile_id)]
    validator.validate_unique_segment_ids(segments, tile_id)
    return segments


def load_dataset(root):
    """读取磁盘上的数据集

    Args:
        root (str): 数据集根目录

    Returns:
        tuple: (DatasetManifest, {tile_id: OverheadTile}, {tile_id: [SegmentRecord]})
    """
    manifest_path = os.path.join(root, MANIFEST_FILE)
    if not os.path.exists(manifest_path):
        raise DatasetFormatError(f"数据集根目录缺少 {MANIFEST_FILE}: {root}")
    manifest = DatasetManifest.from_dict(JsonHandler().load_json(manifest_path))
    RecordValidator().check_split_fractions(manifest.split_of())

    tiles, segments = {}, {}
    for entry in manifest.tiles:
        tile_dir = os.path.join(root, entry.id)
        image = load_tile_image(os.path.join(tile_dir, IMAGE_FILE), entry.id)
        try:
            tiles[entry.id] = OverheadTile(entry.id, image, entry.bounds, manifest.resolution)
        except ValueError as e:
            raise DatasetFormatError(str(e), entry.id)
        segments[entry.id] = load_segments(os.path.join(tile_dir, SEGMENTS_FILE), entry.id)
    logger.info("已加载数据集 %s（城市 %s）：%d 个瓦片", root, manifest.city, len(tiles))
    return manifest, tiles, segments


def write_dataset(root, manifest, tiles, segments):
    """按规范目录结构写出数据集（load_dataset的逆操作）"""
    handler = JsonHandler()
    for entry in manifest.tiles:
        tile_dir = os.path.join(root, entry.id)
        save_tile_image(tiles[entry.id].image, os.path.join(tile_dir, IMAGE_FILE))
        records = [segment_to_record(s) for s in sorted(segments[entry.id], key=lambda s: s.segment_id)]
        handler.save_jsonl(records, os.path.join(tile_dir, SEGMENTS_FILE))
    handler.save_json(manifest.to_dict(), os.path.join(root, MANIFEST_FILE))
    logger.info("已写出数据集 %s：%d 个瓦片", root, len(manifest.tiles))


@dataclass
class TileData:
    """训练/评估用的瓦片：静态标注与位置图预先算好"""
    tile: OverheadTile
    segments: list
    masks: object
    location_map: np.ndarray
    observed_times: list

    @property
    def id(self):
        return self.tile.id


def prepare_tile(tile, segments, region_bounds, k=ORIENTATION_BINS, half_width=ROAD_HALF_WIDTH_M):
    masks = build_label_masks(segments, tile, half_width, k)
    location_map = make_location_map(tile, region_bounds)
    observed = set()
    present = set(np.unique(masks.segment_raster).tolist())
    for seg in segments:
        # 只有在瓦片内落下了像素的路段才能提供监督
        if seg.segment_id in present:
            observed |= seg.observed_times()
    return TileData(tile, segments, masks, location_map, sorted(observed))


def prepare_split(dataset, split, k=ORIENTATION_BINS):
    """把load_dataset的结果中某个划分的瓦片转换为TileData列表"""
    manifest, tiles, segments = dataset
    return [prepare_tile(tiles[t], segments[t], manifest.region_bounds, k) for t in manifest.tile_ids(split)]


@dataclass
class TrainingExample:
    image: np.ndarray
    context: GeoTemporalContext
    masks: object
    speed: np.ndarray
    count: np.ndarray
    valid: np.ndarray


def sample_training_example(tile_data, rng):
    """在瓦片的已观测时刻中均匀采样一个(day, hour)，并动态生成速度掩膜

    Args:
        tile_data (TileData): 预处理后的瓦片
        rng (np.random.Generator): 随机数生成器

    Returns:
        TrainingExample
    """
    if not tile_data.observed_times:
        raise NoSupervisionError(f"瓦片 {tile_data.id} 没有任何观测，跳过")
    day, hour = tile_data.observed_times[int(rng.integers(len(tile_data.observed_times)))]
    speed, count, valid = make_speed_mask(tile_data.masks.segment_raster, tile_data.segments, day, hour)
    context = GeoTemporalContext(tile_data.location_map, day, hour)
    return TrainingExample(tile_data.tile.image, context, tile_data.masks, speed, count, valid)


def example_to_tensors(example, tile_index=0):
    """TrainingExample -> 张量字典（供DataLoader批处理）"""
    return {
        "image": torch.from_numpy(example.image),
        "location_map": torch.from_numpy(example.context.location_map),
        "day": torch.tensor(example.context.day, dtype=torch.long),
        "hour": torch.tensor(example.context.hour, dtype=torch.long),
        "segment_raster": torch.from_numpy(example.masks.segment_raster),
        "road_mask": torch.from_numpy(example.masks.road_mask.astype(np.float32)),
        "orientation_bins": torch.from_numpy(example.masks.orientation_bins),
        "speed": torch.from_numpy(example.speed),
        "count": torch.from_numpy(example.count),
        "valid": torch.from_numpy(example.valid),
        "tile_index": torch.tensor(tile_index, dtype=torch.long),
    }


class TileDataset(Dataset):
    """按(seed, epoch, index)确定性采样时间的瓦片数据集

    没有任何观测的瓦片在构造时被剔除。数据在生成后不再修改，可以安全地被多个worker读取。
    """

    def __init__(self, tiles, seed=0):
        self.tiles = [t for t in tiles if t.observed_times]
        skipped = len(tiles) - len(self.tiles)
        if skipped:
            logger.warning("跳过 %d 个没有观测的瓦片", skipped)
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.tiles)

    def __getitem__(self, index):
        rng = np.random.default_rng([self.seed, self.epoch, index])
        return example_to_tensors(sample_training_example(self.tiles[index], rng), index)


def build_loader(dataset, batch_size, shuffle=True, num_workers=0, epoch=0):
    """构造DataLoader；打乱顺序由 seed + epoch 决定"""
    dataset.set_epoch(epoch)
    generator = torch.Generator()
    generator.manual_seed(dataset.seed + epoch)
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, num_workers=num_workers,
                      collate_fn=default_collate, generator=generator, drop_last=False)
