import os
import sys
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn as nn

# 添加项目根目录到Python路径
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import MODEL_PRESETS, ORIENTATION_BINS, TASKS, TrainConfig  # noqa: E402
from models.decoders import TParamMaps, TaskOutputs  # noqa: E402
from utils.dataset_io import load_dataset, prepare_split, prepare_tile  # noqa: E402
from utils.georef import Bounds, OverheadTile, SegmentRecord  # noqa: E402
from utils.synth_city import SynthSpec, synth_city  # noqa: E402

TINY_SPEC = SynthSpec(seed=3, tiles=4, grid_size=3, image_size=64, resolution=2.0)


@pytest.fixture
def toy_model_config():
    """toy预设缩小到64×64输入"""
    base = MODEL_PRESETS["toy"]
    return replace(base, encoder=replace(base.encoder, image_size=64))


@pytest.fixture
def fast_train_config():
    return TrainConfig(lr=1e-3, epochs=1, batch_size=2, accumulation_steps=1, device="cpu")


@pytest.fixture(scope="session")
def tiny_dataset_root(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("tiny_city"))
    synth_city(TINY_SPEC, root)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_root):
    return load_dataset(tiny_dataset_root)


@pytest.fixture(scope="session")
def tiny_splits(tiny_dataset):
    return {split: prepare_split(tiny_dataset, split) for split in ("train", "val", "test")}


def horizontal_segment(segment_id, northing, observations=None, start=0.0, end=16.0):
    return SegmentRecord(segment_id, [[start, northing], [end, northing]], observations or {})


def make_tile_data(key, segments, size=16):
    """影像亮度为key/10的小瓦片（1 m/px），替身模型据此识别瓦片"""
    bounds = Bounds(0.0, float(size), 0.0, float(size))
    image = np.full((3, size, size), key / 10.0, dtype=np.float32)
    tile = OverheadTile(f"t{key}", image, bounds, 1.0)
    return prepare_tile(tile, segments, bounds)


class StubTrafficModel(nn.Module):
    """替身模型：按瓦片查表，在每个路段的像素上输出常数速度

    Args:
        rasters (dict): key -> 路段编号栅格
        speeds (dict): (key, day, hour) -> {segment_id: mu}；也可以用key作为与时间无关的默认表
        sigma (float): 常数sigma
    """

    def __init__(self, rasters, speeds, sigma=1.0, k=ORIENTATION_BINS):
        super().__init__()
        self.rasters = rasters
        self.speeds = speeds
        self.sigma = sigma
        self.k = k

    def forward(self, image, location_map=None, day=None, hour=None, tasks=TASKS):
        mus, roads = [], []
        for b in range(image.shape[0]):
            key = int(round(float(image[b, 0, 0, 0]) * 10))
            raster = torch.from_numpy(self.rasters[key])
            table = self.speeds.get((key, int(day[b]), int(hour[b])), self.speeds.get(key, {}))
            mu = torch.zeros(raster.shape)
            for seg_id, value in table.items():
                mu[raster == seg_id] = value
            mus.append(mu)
            roads.append((raster > 0).float() * 20.0 - 10.0)
        mu = torch.stack(mus)
        b, h, w = mu.shape
        return TaskOutputs(TParamMaps(mu, torch.full_like(mu, self.sigma)), torch.stack(roads),
                           torch.zeros(b, self.k, h, w))
