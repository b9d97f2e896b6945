"""文件统一读写工具

集中管理 YAML / JSON / 二进制文件的读写，避免各模块重复实现。
统一 encoding="utf-8"、空值保护、目录自动创建、原子写入。
JSON 输出使用固定的键顺序与缩进，保证相同输入得到字节一致的文件。
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any

import yaml

from slideseek.core.exceptions import DataError

logger = logging.getLogger(__name__)


def atomic_write_bytes(path: Path, content: bytes) -> None:
    """原子写入文件：先写临时文件再 rename，防止中途崩溃导致损坏"""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(content)
        os.replace(tmp, str(path))
    except BaseException:
        os.unlink(tmp)
        raise


def atomic_write(path: Path, content: str) -> None:
    """原子写入文本文件"""
    atomic_write_bytes(path, content.encode("utf-8"))


def load_yaml(path: str | Path) -> dict:
    """安全读取 YAML 文件，文件不存在或为空时返回空 dict"""
    p = Path(path)
    if not p.exists():
        return {}
    try:
        with open(p, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise DataError(f"YAML 解析失败: {p}: {e}") from e
    if not isinstance(data, dict):
        raise DataError(f"YAML 顶层必须是映射: {p}")
    return data


def dump_json(data: Any) -> str:
    """规范化 JSON 文本（缩进 2、保留非 ASCII、末尾换行）"""
    return json.dumps(data, indent=2, ensure_ascii=False) + "\n"


def save_json(path: str | Path, data: Any) -> None:
    """原子写入 JSON 文件"""
    atomic_write(Path(path), dump_json(data))


def load_json(path: str | Path) -> Any:
    """读取 JSON 文件，解析失败抛 DataError"""
    p = Path(path)
    try:
        with open(p, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"JSON 解析失败: {p}: {e}") from e


def read_jsonl(path: str | Path) -> list[dict]:
    """逐行读取 JSON-lines 文件，跳过空行"""
    p = Path(path)
    rows: list[dict] = []
    with open(p, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{p} 第 {line_no} 行 JSON 解析失败: {e}") from e
            if not isinstance(row, dict):
                raise DataError(f"{p} 第 {line_no} 行不是 JSON 对象")
            rows.append(row)
    return rows
