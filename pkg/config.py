"""
配置文件，保存系统设置、常量以及模型/训练配置
"""
import os
from dataclasses import dataclass, field, fields, replace, asdict

from utils.exceptions import ConfigError

# 运行目录与设备（可通过.env或环境变量覆盖）
RUNS_DIR = os.environ.get("TRAFFIC_RUNS_DIR", "runs")
DEFAULT_DEVICE = os.environ.get("TRAFFIC_DEVICE", "cpu")

# 标注生成
ROAD_HALF_WIDTH_M = 2.0  # 道路缓冲半宽（米）
ORIENTATION_BINS = 16  # 行驶方向角度分箱数K

# 概率输出
SIGMA_FLOOR = 1e-3  # softplus之后加到sigma上的下限（km/h）

# 应用导出
MIN_TRAVEL_SPEED_KMH = 0.1  # 旅行时间导出时的速度下限
MOTION_MODEL_STRIDE = 16  # 运动模型箭头的采样步长（像素）
ROAD_PROB_THRESHOLD = 0.5
UNCERTAINTY_MAX_SPEED = 120.0
UNCERTAINTY_STEP = 0.5

# 数据集划分比例
SPLIT_FRACTIONS = {"train": 0.85, "val": 0.05, "test": 0.10}
SPLIT_TOLERANCE = 0.02

# 星期编号：0=周一 ... 6=周日
DAY_NAMES = ["周一", "周二", "周三", "周四", "周五", "周六", "周日"]

# 宏观评估的默认时间：周一、周六 × 0/4/8/12/17/20点
MACRO_DAYS = (0, 5)
MACRO_HOURS = (0, 4, 8, 12, 17, 20)
DEFAULT_MACRO_TIMES = tuple((d, h) for d in MACRO_DAYS for h in MACRO_HOURS)

CONTEXT_PATHWAYS = ("loc", "time", "loctime")
TASKS = ("speed", "road", "orientation")
SPEED_OBJECTIVES = ("student_t", "pseudo_huber")


@dataclass(frozen=True)
class EncoderConfig:
    """视觉编码器配置，默认值对应1024×1024输入的完整层规划"""
    image_size: int = 1024
    channels: tuple = (64, 128, 256, 512)
    stem_mid: int = 48  # 卷积stem第一层的输出通道
    mbconv_depths: tuple = (2, 3)
    mhsa_depths: tuple = (5, 2)
    heads: int = 8
    expansion: int = 4
    se_ratio: float = 0.25
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size <= 0 or self.image_size % 32 != 0:
            raise ConfigError(f"image_size必须是32的正整数倍，当前为{self.image_size}")
        if len(self.channels) != 4 or any(c < 1 for c in self.channels):
            raise ConfigError(f"channels需要4个正整数，当前为{self.channels}")
        if len(self.mbconv_depths) != 2 or len(self.mhsa_depths) != 2:
            raise ConfigError("mbconv_depths与mhsa_depths都需要2个值")
        if any(d < 1 for d in tuple(self.mbconv_depths) + tuple(self.mhsa_depths)):
            raise ConfigError("每个阶段的block数量必须 >= 1")
        if self.heads < 1 or self.expansion < 1 or self.stem_mid < 1:
            raise ConfigError("heads/expansion/stem_mid必须为正")
        if not 0 < self.se_ratio <= 1 or self.mlp_ratio <= 0:
            raise ConfigError("se_ratio需在(0, 1]内，mlp_ratio必须为正")
        for c in self.channels[2:]:
            if c % self.heads != 0:
                raise ConfigError(f"Transformer阶段通道数{c}不能被注意力头数{self.heads}整除")

    @property
    def token_grids(self):
        """两个Transformer阶段的token网格边长"""
        return (self.image_size // 16, self.image_size // 32)


@dataclass(frozen=True)
class ModelConfig:
    """完整多任务模型的配置"""
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_dim: int = 512
    dropout: float = 0.1
    orientation_bins: int = ORIENTATION_BINS
    context: tuple = CONTEXT_PATHWAYS
    use_image: bool = True
    gtpe_dim: int = 64
    gtpe_hidden: int = 64
    gtpe_loctime_hidden: int = 128
    gtpe_depth: int = 3
    siren_w0: float = 30.0
    sigma_floor: float = SIGMA_FLOOR

    def __post_init__(self):
        unknown = set(self.context) - set(CONTEXT_PATHWAYS)
        if unknown:
            raise ConfigError(f"未知的上下文通路: {sorted(unknown)}")
        if len(set(self.context)) != len(self.context):
            raise ConfigError(f"上下文通路重复: {self.context}")
        if self.orientation_bins < 2:
            raise ConfigError("orientation_bins必须 >= 2")
        if self.decoder_dim < 1 or not 0 <= self.dropout < 1:
            raise ConfigError("decoder_dim必须为正，dropout需在[0, 1)内")
        if self.gtpe_depth < 1 or self.sigma_floor <= 0:
            raise ConfigError("gtpe_depth必须 >= 1，sigma_floor必须为正")
        if not self.use_image and not self.context:
            raise ConfigError("图像与上下文都被关闭，模型没有任何输入")

    @property
    def uses_context(self):
        return len(self.context) > 0


@dataclass(frozen=True)
class TrainConfig:
    """训练超参数"""
    lr: float = 1e-4
    epochs: int = 50
    batch_size: int = 2
    accumulation_steps: int = 8
    tasks: tuple = TASKS
    speed_objective: str = "student_t"
    selection_metric: str = "val_rmse"
    seed: int = 0
    eval_seed: int = 0
    num_workers: int = 0
    device: str = DEFAULT_DEVICE
    macro_times: tuple = DEFAULT_MACRO_TIMES

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1 or self.accumulation_steps < 1:
            raise ConfigError("lr/batch_size/accumulation_steps必须为正，epochs不能为负")
        if not self.tasks:
            raise ConfigError("至少需要启用一个任务")
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ConfigError(f"未知的任务: {sorted(unknown)}")
        if self.speed_objective not in SPEED_OBJECTIVES:
            raise ConfigError(f"未知的速度目标函数: {self.speed_objective}")
        if self.speed_objective == "pseudo_huber":
            raise ConfigError("pseudo_huber回归目标尚未实现，请使用student_t")
        if self.selection_metric != "val_rmse":
            raise ConfigError("目前只支持使用验证集RMSE进行模型选择")
        if self.num_workers < 0:
            raise ConfigError("num_workers不能为负")
        for d, h in self.macro_times:
            if not (0 <= d <= 6 and 0 <= h <= 23):
                raise ConfigError(f"宏观评估时间越界: ({d}, {h})")


# 预设模型配置
# full: 完整规模（1024²输入）；desk: 完整通道规划，256²输入；toy: 256²输入，缩小宽度用于快速实验
MODEL_PRESETS = {
    "full": ModelConfig(),
    "desk": ModelConfig(encoder=EncoderConfig(image_size=256)),
    "toy": ModelConfig(
        encoder=EncoderConfig(
            image_size=256,
            channels=(16, 32, 64, 128),
            stem_mid=12,
            mbconv_depths=(1, 1),
            mhsa_depths=(1, 1),
            heads=4,
        ),
        decoder_dim=64,
    ),
}
DEFAULT_PRESET = "full"


def _parse_list(value, cast):
    items = [v.strip() for v in value.split(",") if v.strip()]
    return tuple(cast(v) for v in items)


def _parse_bool(value):
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"无法解析布尔值: {value}")


def _parse_context(value):
    if value.strip().lower() in ("", "none"):
        return ()
    return _parse_list(value, str)


def parse_times(value):
    """解析 "0:8, 5:17" 形式的(day, hour)列表"""
    times = []
    for item in _parse_list(value, str):
        try:
            d, h = item.split(":")
            d, h = int(d), int(h)
        except ValueError:
            raise ConfigError(f"时间格式应为 day:hour，当前为 {item}")
        if not (0 <= d <= 6 and 0 <= h <= 23):
            raise ConfigError(f"时间越界: ({d}, {h})")
        times.append((d, h))
    if not times:
        raise ConfigError("时间列表为空")
    return tuple(times)


# 配置文件中的键 -> (所属配置, 字段名, 解析函数)
ENCODER_KEYS = {
    "image_size": ("image_size", int),
    "channels": ("channels", lambda v: _parse_list(v, int)),
    "heads": ("heads", int),
    "expansion": ("expansion", int),
    "se_ratio": ("se_ratio", float),
    "mlp_ratio": ("mlp_ratio", float),
}
MODEL_KEYS = {
    "decoder_dim": ("decoder_dim", int),
    "dropout": ("dropout", float),
    "orientation_bins": ("orientation_bins", int),
    "context": ("context", _parse_context),
    "use_image": ("use_image", _parse_bool),
}
TRAIN_KEYS = {
    "lr": ("lr", float),
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "accumulation_steps": ("accumulation_steps", int),
    "tasks": ("tasks", lambda v: _parse_list(v, str)),
    "speed_objective": ("speed_objective", str),
    "seed": ("seed", int),
    "eval_seed": ("eval_seed", int),
    "num_workers": ("num_workers", int),
    "device": ("device", str),
    "macro_times": ("macro_times", parse_times),
}


def parse_config_text(text):
    """解析扁平的 key = value 配置文本

    Args:
        text (str): 配置文本，支持#注释与空行

    Returns:
        dict: 键值对（值为原始字符串）
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"配置第{lineno}行缺少'=': {raw}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def build_configs(values=None):
    """根据键值对构造模型与训练配置

    Args:
        values (dict, optional): parse_config_text的输出

    Returns:
        tuple: (ModelConfig, TrainConfig)
    """
    values = dict(values or {})
    preset = values.pop("preset", DEFAULT_PRESET)
    if preset not in MODEL_PRESETS:
        raise ConfigError(f"未知的模型预设: {preset}，可选 {sorted(MODEL_PRESETS)}")
    model_config = MODEL_PRESETS[preset]

    encoder_updates, model_updates, train_updates = {}, {}, {}
    for key, value in values.items():
        try:
            if key in ENCODER_KEYS:
                name, cast = ENCODER_KEYS[key]
                encoder_updates[name] = cast(value)
            elif key == "depths":
                depths = _parse_list(value, int)
                if len(depths) != 4:
                    raise ConfigError("depths需要4个整数：两个MBConv阶段与两个MHSA阶段")
                encoder_updates["mbconv_depths"] = depths[:2]
                encoder_updates["mhsa_depths"] = depths[2:]
            elif key in MODEL_KEYS:
                name, cast = MODEL_KEYS[key]
                model_updates[name] = cast(value)
            elif key in TRAIN_KEYS:
                name, cast = TRAIN_KEYS[key]
                train_updates[name] = cast(value)
            else:
                raise ConfigError(f"未知的配置项: {key}")
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"配置项 {key} 的值无法解析: {value}")

    if encoder_updates:
        model_updates["encoder"] = replace(model_config.encoder, **encoder_updates)
    model_config = replace(model_config, **model_updates)
    return model_config, TrainConfig(**train_updates)


def load_config_file(path=None, overrides=None):
    """从配置文件加载配置，命令行参数可以进一步覆盖

    Args:
        path (str, optional): 配置文件路径，为None时只使用默认值
        overrides (dict, optional): 额外的键值覆盖（字符串值）

    Returns:
        tuple: (ModelConfig, TrainConfig)
    """
    values = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                values = parse_config_text(f.read())
        except FileNotFoundError:
            raise ConfigError(f"找不到配置文件: {path}")
    if overrides:
        values.update({k: str(v) for k, v in overrides.items() if v is not None})
    return build_configs(values)


def model_config_to_dict(model_config):
    return asdict(model_config)


def model_config_from_dict(data):
    data = dict(data)
    encoder = EncoderConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in data.pop("encoder").items()})
    known = {f.name for f in fields(ModelConfig)}
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items() if k in known}
    return ModelConfig(encoder=encoder, **kwargs)


def train_config_to_dict(train_config):
    return asdict(train_config)


def train_config_from_dict(data):
    kwargs = {}
    for k, v in data.items():
        if k == "macro_times":
            v = tuple(tuple(t) for t in v)
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return TrainConfig(**kwargs)
