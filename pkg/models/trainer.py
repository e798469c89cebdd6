"""
训练模块：多任务训练循环（Adam + 梯度累积）、按验证集RMSE选择模型、断点续训，以及只微调GTPE的位置适配
"""
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from config import TrainConfig, train_config_to_dict, model_config_to_dict
from models.evaluation import evaluate_micro
from models.prob_loss import batch_speed_loss, road_loss, orientation_loss, total_loss
from models.traffic_model import (build_model, checkpoint_payload, count_parameters, load_checkpoint,
                                  model_from_checkpoint)
from utils.dataset_io import TileDataset, build_loader
from utils.exceptions import ConfigError, DivergenceError, NoSupervisionError
from utils.session_manager import SessionManager

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    best_checkpoint: str
    last_checkpoint: str
    best_val_rmse: float
    history: list = field(default_factory=list)
    trainable_parameters: int = 0
    session_dir: str = None


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed)


def batch_losses(model, batch, tasks, device):
    """一个批次的前向与各项损失

    Returns:
        tuple: (总损失或None, {任务名: float})
    """
    batch = {k: v.to(device) for k, v in batch.items()}
    outputs = model(batch["image"], batch["location_map"], batch["day"], batch["hour"], tasks)
    speed = road = orient = None
    if "speed" in tasks:
        speed = batch_speed_loss(outputs.speed, batch["segment_raster"], batch["speed"],
                                 batch["count"], batch["valid"])
    if "road" in tasks:
        road = road_loss(outputs.road_logits, batch["road_mask"])
    if "orientation" in tasks:
        orient = orientation_loss(outputs.orientation_logits, batch["orientation_bins"])
    loss = total_loss(speed, road, orient, tasks)
    parts = {}
    if speed is not None and speed.supervised:
        parts["speed_loss"] = float(speed.value.detach())
    if road is not None:
        parts["road_loss"] = float(road.detach())
    if orient is not None and orient.supervised:
        parts["orientation_loss"] = float(orient.value.detach())
    if not torch.is_tensor(loss):
        return None, parts
    return loss, parts


class Trainer:
    """训练器：管理一次运行中的模型、优化器、数据与记录

    Args:
        model (TrafficModel): 待训练模型
        train_config (TrainConfig): 训练超参数
        train_tiles (list): 训练集TileData
        val_tiles (list): 验证集TileData（用于模型选择）
        session (SessionManager): 运行记录
        parameters (iterable, optional): 需要优化的参数，默认为全部可训练参数
        freeze_norm (bool): 为True时整个模型保持eval模式（BN统计量与dropout都不变）
    """

    def __init__(self, model, train_config, train_tiles, val_tiles, session, parameters=None, freeze_norm=False):
        self.model = model
        self.config = train_config
        self.device = torch.device(train_config.device)
        self.model.to(self.device)
        self.train_set = TileDataset(train_tiles, train_config.seed)
        if len(self.train_set) == 0:
            raise NoSupervisionError("训练集中没有任何有观测的瓦片")
        self.val_tiles = list(val_tiles)
        self.session = session
        self.freeze_norm = freeze_norm
        params = [p for p in (parameters if parameters is not None else model.parameters()) if p.requires_grad]
        self.optimizer = torch.optim.Adam(params, lr=train_config.lr)
        self.start_epoch = 0
        self.best_val_rmse = math.inf
        self.history = []

    def resume(self, checkpoint):
        """从last检查点恢复模型、优化器、随机数状态与历史"""
        self.model.load_state_dict(checkpoint["model_state"])
        self.optimizer.load_state_dict(checkpoint["optimizer_state"])
        torch.set_rng_state(checkpoint["torch_rng_state"])
        self.start_epoch = checkpoint["epoch"]
        self.best_val_rmse = checkpoint.get("best_val_rmse", math.inf)
        self.history = list(checkpoint.get("history", []))
        logger.info("从第 %d 个epoch之后继续训练", self.start_epoch)

    def _step(self, pending):
        # 累积的是各批次损失之和的梯度，除以本组实际批次数得到平均梯度
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                if p.grad is not None:
                    p.grad.div_(pending)
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)

    def train_epoch(self, epoch):
        self.model.train(not self.freeze_norm)
        loader = build_loader(self.train_set, self.config.batch_size, True, self.config.num_workers, epoch)
        acc = self.config.accumulation_steps
        self.optimizer.zero_grad(set_to_none=True)
        totals, parts_sum, n_batches, pending = 0.0, {}, 0, 0

        for batch_idx, batch in enumerate(loader):
            loss, parts = batch_losses(self.model, batch, self.config.tasks, self.device)
            if loss is None:
                continue
            if not torch.isfinite(loss):
                raise DivergenceError(f"第 {epoch + 1} 个epoch第 {batch_idx + 1} 个批次的损失为 {float(loss)}，训练中止")
            loss.backward()
            pending += 1
            totals += float(loss.detach())
            n_batches += 1
            for k, v in parts.items():
                parts_sum[k] = parts_sum.get(k, 0.0) + v
            if pending == acc:
                self._step(pending)
                pending = 0
        if pending:
            self._step(pending)

        row = {"train_loss": totals / n_batches if n_batches else float("nan")}
        row.update({k: v / n_batches for k, v in parts_sum.items()})
        return row

    def validate(self):
        if not self.val_tiles:
            return None
        return evaluate_micro(self.model, self.val_tiles, self.config.eval_seed)

    def _payload(self, epoch, extra):
        return checkpoint_payload(
            self.model,
            train_config=train_config_to_dict(self.config),
            epoch=epoch,
            best_val_rmse=self.best_val_rmse,
            optimizer_state=self.optimizer.state_dict(),
            torch_rng_state=torch.get_rng_state(),
            history=list(self.history),
            **extra,
        )

    def fit(self, extra=None):
        """运行全部epoch

        Returns:
            TrainResult
        """
        extra = extra or {}
        best_path = self.session.checkpoint_path("best")
        last_path = self.session.checkpoint_path("last")
        if self.start_epoch == 0:
            # 0个epoch时输出的就是初始权重
            self.session.save_checkpoint(self._payload(0, extra), "best")
            self.session.save_checkpoint(self._payload(0, extra), "last")

        for epoch in range(self.start_epoch, self.config.epochs):
            started = time.time()
            row = {"epoch": epoch + 1}
            row.update(self.train_epoch(epoch))
            report = self.validate()
            if report is not None:
                row.update({"val_rmse": report.rmse, "val_mae": report.mae, "val_r2": report.r2})
            row["seconds"] = round(time.time() - started, 3)
            self.history.append(row)
            self.session.append_train_log(row)
            logger.info("epoch %d/%d: loss=%.4f val_rmse=%s", epoch + 1, self.config.epochs,
                        row["train_loss"], f"{row['val_rmse']:.3f}" if "val_rmse" in row else "-")

            improved = report is not None and report.rmse < self.best_val_rmse
            if improved:
                self.best_val_rmse = report.rmse
            if improved or report is None:
                self.session.save_checkpoint(self._payload(epoch + 1, extra), "best")
                self.session.add_intermediate_state("best_checkpoint", {"epoch": epoch + 1,
                                                                         "val_rmse": row.get("val_rmse")})
            self.session.save_checkpoint(self._payload(epoch + 1, extra), "last")

        result = TrainResult(best_path, last_path, self.best_val_rmse, list(self.history),
                             count_parameters(self.model), self.session.get_session_dir())
        self.session.set_final_result({"best_val_rmse": None if math.isinf(self.best_val_rmse)
                                       else self.best_val_rmse,
                                       "epochs": self.config.epochs,
                                       "trainable_parameters": result.trainable_parameters})
        return result


def train(model_config, train_config, train_tiles, val_tiles, session=None, resume=None):
    """训练模型并按验证集speed RMSE保存最佳检查点

    Args:
        model_config (ModelConfig): 模型配置
        train_config (TrainConfig): 训练配置
        train_tiles (list): 训练集TileData（非空）
        val_tiles (list): 验证集TileData（非空）
        session (SessionManager, optional): 运行记录，默认新建
        resume (str or dict, optional): last检查点，从中断处继续

    Returns:
        TrainResult
    """
    if not train_tiles or not val_tiles:
        raise ConfigError("训练需要非空的训练集与验证集")
    seed_everything(train_config.seed)
    session = session or SessionManager("train")
    session.set_config({"model": model_config_to_dict(model_config), "train": train_config_to_dict(train_config)})
    model = build_model(model_config)
    trainer = Trainer(model, train_config, train_tiles, val_tiles, session)
    if resume is not None:
        if not isinstance(resume, dict):
            resume = load_checkpoint(resume)
        trainer.resume(resume)
    return trainer.fit()


def freeze_for_adaptation(model):
    """除GTPE外的全部参数设为不可训练

    Returns:
        list: GTPE参数
    """
    if model.gtpe is None:
        raise ConfigError("检查点没有启用GTPE，无法进行位置适配")
    for p in model.parameters():
        p.requires_grad_(False)
    params = list(model.gtpe.parameters())
    for p in params:
        p.requires_grad_(True)
    return params


def adapt_location(checkpoint, train_tiles, val_tiles, train_config=None, session=None):
    """位置适配：冻结除GTPE以外的全部参数，在新城市数据上微调

    模型全程处于eval模式，BN统计量不更新，因此非GTPE参数与缓冲区在适配前后逐位相同。

    Args:
        checkpoint (str or dict): 源城市训练得到的检查点
        train_tiles (list): 新城市的训练TileData
        val_tiles (list): 新城市的验证TileData（可为空，此时保存最后一个epoch）
        train_config (TrainConfig, optional): 训练配置（epochs为适配轮数）

    Returns:
        TrainResult
    """
    train_config = train_config or TrainConfig()
    model, source = model_from_checkpoint(checkpoint)
    params = freeze_for_adaptation(model)
    seed_everything(train_config.seed)
    session = session or SessionManager("adapt")
    session.set_config({"model": model_config_to_dict(model.config), "train": train_config_to_dict(train_config),
                        "source_epoch": source.get("epoch")})
    trainer = Trainer(model, train_config, train_tiles, val_tiles, session, params, freeze_norm=True)
    logger.info("位置适配：可训练参数 %s 个", f"{count_parameters(model):,}")
    return trainer.fit({"adapted_from_epoch": source.get("epoch")})
