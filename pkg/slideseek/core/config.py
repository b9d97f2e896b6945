"""集中配置管理

一份扁平的 YAML 键值文档覆盖后端、预算、轮次上限、倍率与阈值；
命令行参数通过 with_overrides() 覆盖文件中的值。
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

from slideseek.core.exceptions import ConfigError
from slideseek.utils.fileio import load_yaml

logger = logging.getLogger(__name__)

_BACKENDS = ("mock", "http")
_MODES = ("multi_agent", "single_agent")
_CLOCKS = ("logical", "wall")


def _default_label_map() -> dict[str, list[str]]:
    return {
        "invasive ductal carcinoma": ["ductal carcinoma in situ", "invasive lobular carcinoma"],
        "adenocarcinoma": ["squamous cell carcinoma", "reactive atypia"],
        "squamous cell carcinoma": ["adenocarcinoma", "squamous dysplasia"],
        "melanoma": ["atypical nevus", "poorly differentiated carcinoma"],
    }


@dataclass
class Config:
    """探索引擎全局配置"""

    # 后端
    backend: str = "mock"
    agent_endpoint: str = ""
    agent_model: str = ""
    captioner_endpoint: str = ""
    captioner_model: str = ""
    api_key_env: str = "PATHLLM_API_KEY"
    request_timeout: float = 60.0
    max_retries: int = 3
    retry_backoff: float = 1.0
    temperature: float = 0.0
    endpoint_concurrency: int = 4
    seed: int = 0

    # 编排
    mode: str = "multi_agent"
    max_rounds: int = 8
    max_tasks_per_round: int = 6
    parallelism: int = 0  # 0 表示等于本轮任务数
    clock: str = "logical"

    # 探索预算与视野
    default_budget: int = 24
    max_task_budget: int = 64
    max_edge: int = 896
    thumbnail_edge: int = 1024
    max_rois: int = 10
    magnifications: list[float] = field(default_factory=lambda: [1.25, 2.5, 5.0, 10.0, 20.0, 40.0])
    high_power: float = 10.0
    medium_power: float = 2.5
    coarse_magnification: float = 1.25
    survey_magnification: float = 5.0
    detail_magnification: float = 20.0
    sweep_cell_px: dict[str, int] = field(default_factory=lambda: {"low": 896, "medium": 224, "high": 896})
    single_agent_magnification: float = 5.0
    single_agent_budget: int = 64

    # 判读
    overlap_threshold: float = 0.25
    flag_keywords: list[str] = field(default_factory=lambda: ["atypical", "suspicious"])
    modality_blocklist: list[str] = field(
        default_factory=lambda: ["IHC", "immunohistochemistry", "special stain", "molecular testing"],
    )
    label_map: dict[str, list[str]] = field(default_factory=_default_label_map)

    # 自定义扩展 (放不到字段里的配置项)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path: str = "configs/default.yml") -> Config:
        """从 YAML 文件加载配置，不存在则返回默认"""
        data = load_yaml(path)
        if not data:
            return cls()
        return cls.from_dict(data, source=str(path))

    @classmethod
    def from_dict(cls, data: dict[str, Any], source: str = "<dict>") -> Config:
        """从映射构造配置（trace 中记录的配置也经此还原）"""
        known = {f.name for f in fields(cls)} - {"extra"}
        matched = {k: v for k, v in data.items() if k in known}
        extra = dict(data.get("extra") or {})
        extra.update({k: v for k, v in data.items() if k not in known and k != "extra"})
        if extra:
            logger.warning("配置包含未知键，已放入 extra: %s", sorted(extra))
        try:
            cfg = cls(**matched)
        except TypeError as e:
            raise ConfigError(f"配置字段无效: {source}: {e}") from e
        cfg.extra = extra
        cfg.validate()
        return cfg

    def with_overrides(self, **flags: Any) -> Config:
        """返回应用了命令行覆盖项的新配置，None 值视为未指定"""
        known = {f.name for f in fields(self)}
        unknown = [k for k in flags if k not in known]
        if unknown:
            raise ConfigError(f"未知的配置覆盖项: {unknown}")
        cfg = replace(self, **{k: v for k, v in flags.items() if v is not None})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        """校验字段取值范围，失败抛 ConfigError"""
        problems: list[str] = []
        if self.backend not in _BACKENDS:
            problems.append(f"backend 必须是 {_BACKENDS} 之一: {self.backend}")
        if self.mode not in _MODES:
            problems.append(f"mode 必须是 {_MODES} 之一: {self.mode}")
        if self.clock not in _CLOCKS:
            problems.append(f"clock 必须是 {_CLOCKS} 之一: {self.clock}")
        if self.request_timeout <= 0:
            problems.append("request_timeout 必须 > 0")
        if self.max_retries < 0:
            problems.append("max_retries 必须 >= 0")
        if not self.magnifications:
            problems.append("magnifications 不能为空")
        if self.max_rounds < 1 or self.max_tasks_per_round < 1:
            problems.append("max_rounds 与 max_tasks_per_round 必须 >= 1")
        if self.default_budget < 1:
            problems.append("default_budget 必须 >= 1")
        if not 0 < self.overlap_threshold <= 1:
            problems.append("overlap_threshold 必须位于 (0, 1]")
        if problems:
            raise ConfigError("配置无效: " + "; ".join(problems))

    def magnification_class(self, magnification: float) -> str:
        """倍率分档：high >= high_power，medium ∈ [medium_power, high_power)，其余 low"""
        if magnification >= self.high_power:
            return "high"
        if magnification >= self.medium_power:
            return "medium"
        return "low"

    def to_dict(self) -> dict:
        return asdict(self)
