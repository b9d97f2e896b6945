"""版本化提示词模板

模板为纯文本资源，使用 string.Template 的 $name 占位符；修改措辞时同步提升 PROMPT_VERSION，
trace 的 init 事件记录该版本号以便回放时定位。
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Template

PROMPT_VERSION = "1"


@lru_cache(maxsize=None)
def load_prompt(name: str) -> Template:
    text = resources.files(__name__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return Template(text)


def render_prompt(name: str, **values: object) -> str:
    """填充模板；缺少占位符的值时抛 KeyError"""
    return load_prompt(name).substitute({k: str(v) for k, v in values.items()})
