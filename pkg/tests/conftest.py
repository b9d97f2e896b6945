"""共享测试夹具：会话级合成切片与 mock 配置"""

from __future__ import annotations

from pathlib import Path

import pytest

from slideseek.core.config import Config
from slideseek.core.models import LesionFocus, PyramidSlide, SyntheticSlideSpec
from slideseek.core.protocols import ChatTurn
from slideseek.core.synthetic import generate_synthetic

LESION_LABEL = "adenocarcinoma"


class ScriptedBackend:
    """按顺序返回预设回复的 chat 后端；Exception 实例会被抛出"""

    endpoint = "http://scripted"

    def __init__(self, *replies: str | Exception) -> None:
        self.replies = list(replies)
        self.calls: list[list[ChatTurn]] = []

    def complete(self, turns: list[ChatTurn]) -> str:
        self.calls.append(list(turns))
        item = self.replies.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def small_spec(slide_id: str = "fixture", *, lesions: bool = True, tissue: bool = True) -> SyntheticSlideSpec:
    """2048x2048 @20x，3 层（1/4/16），一个组织椭圆，可选一个病灶"""
    return SyntheticSlideSpec(
        slide_id=slide_id,
        width=2048,
        height=2048,
        base_magnification=20.0,
        tile_edge=256,
        downsamples=[1, 4, 16],
        tissue_boxes=[(256, 256, 1792, 1792)] if tissue else [],
        lesion_foci=[LesionFocus(700, 700, 1000, 1000, LESION_LABEL)] if lesions and tissue else [],
        rng_seed=1,
    )


def mock_config(**overrides: object) -> Config:
    cfg = Config(backend="mock", max_retries=0, retry_backoff=0.0, clock="logical")
    return cfg.with_overrides(**overrides) if overrides else cfg


@pytest.fixture(scope="session")
def lesion_slide_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    out = tmp_path_factory.mktemp("slides") / "lesion"
    generate_synthetic(small_spec("lesion"), out)
    return out


@pytest.fixture(scope="session")
def benign_slide_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    out = tmp_path_factory.mktemp("slides") / "benign"
    generate_synthetic(small_spec("benign", lesions=False), out)
    return out


@pytest.fixture(scope="session")
def blank_slide_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    out = tmp_path_factory.mktemp("slides") / "blank"
    generate_synthetic(small_spec("blank", tissue=False), out)
    return out


@pytest.fixture(scope="session")
def lesion_slide(lesion_slide_dir: Path) -> PyramidSlide:
    from slideseek.core.slide_store import open_slide
    return open_slide(lesion_slide_dir)


@pytest.fixture
def config() -> Config:
    return mock_config()
