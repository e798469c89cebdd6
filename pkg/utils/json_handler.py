"""
JSON处理工具类，负责数据集清单、路段JSONL记录与运行记录的读写
"""
import json
import logging
import os

from utils.exceptions import DatasetFormatError

logger = logging.getLogger(__name__)


def dumps_compact(data):
    """紧凑、确定性的单行JSON（JSONL记录使用）"""
    return json.dumps(data, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def atomic_write_text(file_path, text):
    """先写临时文件再重命名，读者永远看不到写了一半的文件"""
    directory = os.path.dirname(file_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp_path = f"{file_path}.tmp"
    with open(tmp_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp_path, file_path)


class JsonHandler:
    """
    JSON处理工具类，用于读写JSON文档与JSONL记录文件
    """

    def load_json(self, file_path, tile_id=None):
        """从文件加载JSON数据

        Args:
            file_path (str): JSON文件路径
            tile_id (str, optional): 出错时在错误信息中标注的瓦片编号

        Returns:
            dict: 加载的JSON数据
        """
        try:
            with open(file_path, "r", encoding="utf-8") as f:
                return json.load(f)
        except FileNotFoundError:
            raise DatasetFormatError(f"找不到文件: {file_path}", tile_id=tile_id)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"JSON解析失败 {file_path}: {e}", tile_id=tile_id, line=e.lineno)

    def save_json(self, data, file_path):
        """将JSON数据原子地保存到文件"""
        atomic_write_text(file_path, json.dumps(data, ensure_ascii=False, indent=2) + "\n")
        logger.debug("已保存JSON: %s", file_path)

    def iter_jsonl(self, file_path, tile_id=None):
        """逐行读取JSONL文件，跳过空行

        Yields:
            tuple: (行号, 解析后的对象)
        """
        try:
            f = open(file_path, "r", encoding="utf-8")
        except FileNotFoundError:
            raise DatasetFormatError(f"找不到文件: {file_path}", tile_id=tile_id)
        with f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    yield lineno, json.loads(line)
                except json.JSONDecodeError as e:
                    raise DatasetFormatError(f"JSONL记录无法解析: {e.msg}", tile_id=tile_id, line=lineno)

    def save_jsonl(self, records, file_path):
        """每条记录一行写入JSONL文件（紧凑格式，末尾换行）"""
        text = "".join(dumps_compact(r) + "\n" for r in records)
        atomic_write_text(file_path, text)
        logger.debug("已保存JSONL: %s", file_path)
