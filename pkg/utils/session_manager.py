"""
运行记录管理器，负责为每次训练/评估/适配创建运行目录并保存记录、日志与检查点
"""
import logging
import os
from datetime import datetime

import pandas as pd
import torch

from config import RUNS_DIR
from utils.json_handler import JsonHandler

logger = logging.getLogger(__name__)


class SessionManager:
    """运行记录管理器类

    运行目录结构::

        <runs_dir>/<command>_<时间戳>/
            session_record.json   配置、中间状态与最终结果
            debug_log.json        带时间戳的操作记录
            train_log.csv         每个epoch一行
            checkpoints/          best.pt、last.pt等

    Args:
        command (str): 子命令名，用作目录前缀
        runs_dir (str, optional): 运行根目录，默认取TRAFFIC_RUNS_DIR
        session_dir (str, optional): 直接指定运行目录（续训时复用已有目录）
    """

    def __init__(self, command="run", runs_dir=None, session_dir=None):
        self.json_handler = JsonHandler()
        if session_dir is None:
            runs_dir = runs_dir or RUNS_DIR
            self.session_id = f"{command}_{datetime.now().strftime('%Y%m%d_%H%M%S_%f')}"
            session_dir = os.path.join(runs_dir, self.session_id)
        else:
            self.session_id = os.path.basename(os.path.normpath(session_dir))
        self.session_dir = session_dir
        self.checkpoint_dir = os.path.join(session_dir, "checkpoints")
        os.makedirs(self.checkpoint_dir, exist_ok=True)

        self.record_path = os.path.join(session_dir, "session_record.json")
        self.debug_log_path = os.path.join(session_dir, "debug_log.json")
        self.train_log_path = os.path.join(session_dir, "train_log.csv")

        if os.path.exists(self.record_path):
            self.session_record = self.json_handler.load_json(self.record_path)
        else:
            self.session_record = {
                "session_id": self.session_id,
                "command": command,
                "start_time": datetime.now().isoformat(),
                "config": {},
                "intermediate_states": [],
                "final_result": None,
            }
        self.debug_log = (self.json_handler.load_json(self.debug_log_path)
                          if os.path.exists(self.debug_log_path) else [])
        self._save_session_record()
        logger.info("运行目录: %s", self.session_dir)

    def set_config(self, config):
        """记录本次运行的完整配置"""
        self.session_record["config"] = config
        self._save_session_record()
        self._log_debug_info("配置", {"keys": sorted(config)})

    def add_intermediate_state(self, state_name, state_data):
        """记录中间状态（例如某个epoch的验证指标）"""
        self.session_record["intermediate_states"].append({
            "timestamp": datetime.now().isoformat(),
            "name": state_name,
            "data": state_data,
        })
        self._save_session_record()
        summary = str(state_data)
        self._log_debug_info("中间状态更新", {
            "state_name": state_name,
            "data_summary": summary[:200] + "..." if len(summary) > 200 else summary,
        })

    def set_final_result(self, result):
        self.session_record["final_result"] = {"timestamp": datetime.now().isoformat(), "data": result}
        self._save_session_record()
        self._log_debug_info("最终结果", {"result_keys": sorted(result) if isinstance(result, dict) else None})

    def append_train_log(self, row):
        """向train_log.csv追加一行（首行写表头）"""
        frame = pd.DataFrame([row])
        write_header = not os.path.exists(self.train_log_path)
        frame.to_csv(self.train_log_path, mode="a", header=write_header, index=False)

    def read_train_log(self):
        if not os.path.exists(self.train_log_path):
            return pd.DataFrame()
        return pd.read_csv(self.train_log_path)

    def checkpoint_path(self, name):
        return os.path.join(self.checkpoint_dir, f"{name}.pt")

    def save_checkpoint(self, payload, name):
        """原子地保存检查点（先写临时文件再重命名）

        Returns:
            str: 检查点路径
        """
        path = self.checkpoint_path(name)
        tmp_path = f"{path}.tmp"
        torch.save(payload, tmp_path)
        os.replace(tmp_path, path)
        self._log_debug_info("保存检查点", {"name": name, "epoch": payload.get("epoch")})
        return path

    def get_session_dir(self):
        return self.session_dir

    def get_debug_log(self):
        return list(self.debug_log)

    def _save_session_record(self):
        self.session_record["end_time"] = datetime.now().isoformat()
        self.json_handler.save_json(self.session_record, self.record_path)

    def _log_debug_info(self, action_type, details):
        self.debug_log.append({
            "timestamp": datetime.now().isoformat(),
            "action_type": action_type,
            "details": details,
        })
        self.json_handler.save_json(self.debug_log, self.debug_log_path)
