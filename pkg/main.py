"""
图像驱动的概率交通建模系统：命令行入口
"""
import argparse
import logging
import os
import sys
from dataclasses import replace

import torch
from dotenv import load_dotenv

# 加载环境变量（TRAFFIC_RUNS_DIR、TRAFFIC_DEVICE），必须在导入config之前
load_dotenv()

from config import (DEFAULT_MACRO_TIMES, TrainConfig, load_config_file, parse_times,  # noqa: E402
                    train_config_from_dict)
from models.applications import (predict_dense, segment_timeseries, export_motion_model,  # noqa: E402
                                 export_travel_times, time_embedding_pca, uncertainty_curve)
from models.evaluation import evaluate_micro, evaluate_macro  # noqa: E402
from models.traffic_model import build_model, load_checkpoint, model_from_checkpoint, model_summary  # noqa: E402
from models.trainer import train, adapt_location  # noqa: E402
from models.traffic_visualization import TrafficVisualization  # noqa: E402
from utils.converter import DtsConverter  # noqa: E402
from utils.dataset_io import load_dataset, prepare_split, prepare_tile  # noqa: E402
from utils.exceptions import TrafficModelError, DatasetFormatError  # noqa: E402
from utils.json_handler import JsonHandler  # noqa: E402
from utils.session_manager import SessionManager  # noqa: E402
from utils.synth_city import SynthSpec, second_city, synth_city, dataset_checksum  # noqa: E402

logger = logging.getLogger(__name__)


class TrafficModelingSystem:
    """交通建模系统的主类，把各子命令映射到数据、训练、评估与应用模块"""

    def __init__(self, runs_dir=None):
        self.runs_dir = runs_dir
        self.json_handler = JsonHandler()
        self.visualization = None

    def _visualization(self):
        if self.visualization is None:
            self.visualization = TrafficVisualization()
        return self.visualization

    def _load_model(self, checkpoint):
        model, ckpt = model_from_checkpoint(checkpoint)
        device = ckpt.get("train_config", {}).get("device", "cpu")
        if device != "cpu" and not torch.cuda.is_available():
            device = "cpu"
        return model.to(device), ckpt

    def _load_tile(self, data_root, tile_id, k):
        manifest, tiles, segments = load_dataset(data_root)
        if tile_id not in tiles:
            raise DatasetFormatError(f"数据集中没有该瓦片，可选: {sorted(tiles)[:10]}...", tile_id)
        return prepare_tile(tiles[tile_id], segments[tile_id], manifest.region_bounds, k)

    def synth(self, args):
        spec = SynthSpec(seed=args.seed, city=args.city, tiles=args.tiles, grid_size=args.grid,
                         image_size=args.image_size, resolution=args.resolution)
        if args.second_city:
            spec = second_city(spec, args.offset)
        synth_city(spec, args.out)
        print(f"合成数据集已写入 {args.out}（sha256 {dataset_checksum(args.out)[:16]}）")

    def train(self, args):
        model_config, train_config = load_config_file(args.config, self._overrides(args))
        dataset = load_dataset(args.data)
        k = model_config.orientation_bins
        session = SessionManager("train", self.runs_dir, session_dir=args.resume_dir)
        resume = session.checkpoint_path("last") if args.resume_dir else None
        result = train(model_config, train_config, prepare_split(dataset, "train", k),
                       prepare_split(dataset, "val", k), session, resume)
        print(f"训练完成，最佳验证RMSE {result.best_val_rmse:.3f}，检查点 {result.best_checkpoint}")

    def evaluate(self, args):
        model, _ = self._load_model(args.checkpoint)
        tiles = prepare_split(load_dataset(args.data), args.split, model.config.orientation_bins)
        session = SessionManager(f"eval_{args.strategy}", self.runs_dir)
        if args.strategy == "micro":
            report = evaluate_micro(model, tiles, args.seed)
        else:
            times = parse_times(args.times) if args.times else DEFAULT_MACRO_TIMES
            report = evaluate_macro(model, tiles, times)
            report.per_time_table().to_csv(os.path.join(session.get_session_dir(), "per_time.csv"), index=False)
        self.json_handler.save_json(report.to_dict(), os.path.join(session.get_session_dir(), "report.json"))
        session.set_final_result(report.to_dict())
        r2 = "未定义" if report.r2 is None else f"{report.r2:.3f}"
        print(f"{args.strategy}: RMSE {report.rmse:.3f}  MAE {report.mae:.3f}  R² {r2}  (路段数 {report.n_pairs})")

    def adapt(self, args):
        checkpoint = load_checkpoint(args.checkpoint)
        if args.config:
            _, train_config = load_config_file(args.config, self._overrides(args))
        else:
            # 默认沿用源检查点的训练配置
            train_config = (train_config_from_dict(checkpoint["train_config"])
                            if "train_config" in checkpoint else TrainConfig())
            updates = {k: v for k, v in self._overrides(args).items() if v is not None}
            train_config = replace(train_config, **updates)
        dataset = load_dataset(args.data)
        k = checkpoint["model_config"]["orientation_bins"]
        result = adapt_location(checkpoint, prepare_split(dataset, "train", k), prepare_split(dataset, "val", k),
                                train_config, SessionManager("adapt", self.runs_dir))
        print(f"位置适配完成（可训练参数 {result.trainable_parameters:,}），检查点 {result.best_checkpoint}")

    def predict(self, args):
        model, _ = self._load_model(args.checkpoint)
        tile_data = self._load_tile(args.data, args.tile, model.config.orientation_bins)
        pred = predict_dense(model, tile_data, args.day, args.hour, with_overlay=True)
        paths = self._visualization().save_prediction_maps(pred, args.out)
        print("已保存: " + ", ".join(sorted(paths.values())))

    def timeseries(self, args):
        model, _ = self._load_model(args.checkpoint)
        tile_data = self._load_tile(args.data, args.tile, model.config.orientation_bins)
        table = segment_timeseries(model, tile_data, args.segment)
        table.to_csv(args.out, index=False)
        if args.plot:
            self._visualization().plot_timeseries(table, args.plot, f"{args.tile} / 路段 {args.segment}")
        print(f"已保存 {len(table)} 行时间序列到 {args.out}")

    def motion_model(self, args):
        model, _ = self._load_model(args.checkpoint)
        tile_data = self._load_tile(args.data, args.tile, model.config.orientation_bins)
        pred = predict_dense(model, tile_data, args.day, args.hour)
        collection = export_motion_model(pred, tile_data.tile, args.stride, k=model.config.orientation_bins)
        self.json_handler.save_json(collection, args.out)
        print(f"已保存 {len(collection['features'])} 个箭头到 {args.out}")

    def travel_times(self, args):
        model, _ = self._load_model(args.checkpoint)
        tile_data = self._load_tile(args.data, args.tile, model.config.orientation_bins)
        pred = predict_dense(model, tile_data, args.day, args.hour, with_overlay=True)
        table = export_travel_times(pred, tile_data)
        table.to_csv(args.out, index=False)
        print(f"已保存 {len(table)} 个路段的旅行时间到 {args.out}")

    def plot_time_embedding(self, args):
        model, _ = self._load_model(args.checkpoint)
        pca = time_embedding_pca(model)
        self._visualization().plot_time_embedding(pca, args.out)
        print(f"时间嵌入图已保存到 {args.out}")

    def plot_uncertainty(self, args):
        model, _ = self._load_model(args.checkpoint)
        tile_data = self._load_tile(args.data, args.tile, model.config.orientation_bins)
        curve = uncertainty_curve(model, tile_data, args.segment, args.day, args.hour, args.observed, args.nu)
        self._visualization().plot_uncertainty(curve, args.out)
        print(f"不确定性曲线已保存到 {args.out}（{len(curve.x)} 个采样点）")

    def dts_convert(self, args):
        DtsConverter(args.city, args.seed).convert(args.tiles, args.segments, args.observations, args.out)
        print(f"已转换到 {args.out}")

    def summary(self, args):
        if args.checkpoint:
            model, _ = self._load_model(args.checkpoint)
        else:
            model_config, _ = load_config_file(args.config)
            model = build_model(model_config)
        for name, count in model_summary(model).items():
            print(f"{name:<22}{count:>14,}")

    @staticmethod
    def _overrides(args):
        return {"seed": args.seed, "epochs": getattr(args, "epochs", None)}


def build_parser():
    """构建命令行解析器"""
    parser = argparse.ArgumentParser(description="图像驱动的概率交通建模系统")
    parser.add_argument("--verbose", action="store_true", help="输出DEBUG级别日志")
    parser.add_argument("--runs-dir", type=str, default=None, help="运行记录根目录（默认TRAFFIC_RUNS_DIR）")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, seed_default=0):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=seed_default, help="随机种子")
        return p

    def add_model_tile(p, need_time=True):
        p.add_argument("--checkpoint", required=True, help="模型检查点")
        p.add_argument("--data", required=True, help="数据集根目录")
        p.add_argument("--tile", required=True, help="瓦片编号")
        if need_time:
            p.add_argument("--day", type=int, required=True, help="星期（0=周一）")
            p.add_argument("--hour", type=int, required=True, help="小时（0-23）")

    p = add("synth", "生成合成城市数据集")
    p.add_argument("--out", required=True)
    p.add_argument("--city", default="A")
    p.add_argument("--tiles", type=int, default=8)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--resolution", type=float, default=1.2)
    p.add_argument("--second-city", action="store_true", help="生成带速度偏移与不同日周期的城市B")
    p.add_argument("--offset", type=float, default=10.0, help="城市B的全局速度偏移（km/h）")

    p = add("train", "训练模型", seed_default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="key = value 配置文件")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume-dir", default=None, help="在已有运行目录中从last检查点继续训练")

    p = add("eval", "评估模型")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", choices=["micro", "macro"], default="micro")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--times", default=None, help="宏观评估时间，如 0:8,5:17")

    p = add("adapt", "位置适配（只微调GTPE）", seed_default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="新城市数据集")
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)

    p = add("predict", "稠密预测并保存PNG")
    add_model_tile(p)
    p.add_argument("--out", required=True, help="输出目录")

    p = add("timeseries", "路段一周时间序列")
    add_model_tile(p, need_time=False)
    p.add_argument("--segment", type=int, required=True)
    p.add_argument("--out", required=True, help="CSV路径")
    p.add_argument("--plot", default=None, help="可选的PNG路径")

    p = add("motion-model", "导出GeoJSON运动模型")
    add_model_tile(p)
    p.add_argument("--stride", type=int, default=16)
    p.add_argument("--out", required=True)

    p = add("travel-times", "导出路段旅行时间CSV")
    add_model_tile(p)
    p.add_argument("--out", required=True)

    p = add("plot-time-embedding", "时间嵌入假彩色图")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = add("plot-uncertainty", "路段速度分布曲线")
    add_model_tile(p)
    p.add_argument("--segment", type=int, required=True)
    p.add_argument("--observed", type=float, default=None)
    p.add_argument("--nu", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("dts-convert", "把DTS表格导出转换为规范数据集目录")
    p.add_argument("--tiles", required=True, help="tiles.csv")
    p.add_argument("--segments", required=True, help="segments.csv")
    p.add_argument("--observations", required=True, help="observations.csv")
    p.add_argument("--city", default="dts")
    p.add_argument("--out", required=True)

    p = add("summary", "按组件统计参数量")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", default=None)
    return parser


COMMANDS = {
    "synth": "synth",
    "train": "train",
    "eval": "evaluate",
    "adapt": "adapt",
    "predict": "predict",
    "timeseries": "timeseries",
    "motion-model": "motion_model",
    "travel-times": "travel_times",
    "plot-time-embedding": "plot_time_embedding",
    "plot-uncertainty": "plot_uncertainty",
    "dts-convert": "dts_convert",
    "summary": "summary",
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    system = TrafficModelingSystem(args.runs_dir)
    try:
        getattr(system, COMMANDS[args.command])(args)
    except TrafficModelError as e:
        print(f"错误: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
