"""配置加载与覆盖测试"""

from __future__ import annotations

from pathlib import Path

import pytest

from slideseek.core.config import Config
from slideseek.core.exceptions import ConfigError

ROOT = Path(__file__).resolve().parents[3]


class TestConfig:
    def test_defaults_valid(self) -> None:
        cfg = Config()
        cfg.validate()
        assert cfg.max_tasks_per_round == 6
        assert cfg.max_rois == 10
        assert cfg.overlap_threshold == 0.25

    def test_missing_file_gives_defaults(self, tmp_path: Path) -> None:
        assert Config.from_file(str(tmp_path / "none.yml")) == Config()

    def test_from_file(self, tmp_path: Path) -> None:
        path = tmp_path / "c.yml"
        path.write_text("backend: mock\nmax_rounds: 3\nmagnifications: [1.25, 5, 20]\n", encoding="utf-8")
        cfg = Config.from_file(str(path))
        assert cfg.max_rounds == 3
        assert cfg.magnifications == [1.25, 5, 20]

    def test_unknown_keys_into_extra(self, caplog: pytest.LogCaptureFixture) -> None:
        with caplog.at_level("WARNING"):
            cfg = Config.from_dict({"max_rounds": 2, "colour": "blue", "extra": {"a": 1}})
        assert cfg.extra == {"a": 1, "colour": "blue"}
        assert "colour" in caplog.text

    def test_roundtrip_through_dict(self) -> None:
        cfg = Config(backend="mock", max_rounds=5, label_map={"x": ["y", "z"]})
        assert Config.from_dict(cfg.to_dict()) == cfg

    def test_invalid_values_listed(self) -> None:
        with pytest.raises(ConfigError) as exc:
            Config.from_dict({"backend": "grpc", "clock": "sundial"})
        assert "backend" in str(exc.value) and "clock" in str(exc.value)

    def test_overlap_threshold_range(self) -> None:
        with pytest.raises(ConfigError, match="overlap_threshold"):
            Config(overlap_threshold=0).validate()

    def test_overrides(self) -> None:
        cfg = Config().with_overrides(max_rounds=4, seed=None, mode="single_agent")
        assert cfg.max_rounds == 4
        assert cfg.seed == 0
        assert cfg.mode == "single_agent"

    def test_unknown_override(self) -> None:
        with pytest.raises(ConfigError, match="未知的配置覆盖项"):
            Config().with_overrides(rounds=3)

    def test_invalid_override(self) -> None:
        with pytest.raises(ConfigError):
            Config().with_overrides(max_rounds=0)

    @pytest.mark.parametrize(("mag", "cls"), [(40, "high"), (10, "high"), (5, "medium"), (2.5, "medium"),
                                              (1.25, "low")])
    def test_magnification_class(self, mag: float, cls: str) -> None:
        assert Config().magnification_class(mag) == cls

    @pytest.mark.parametrize("name", ["default.yml", "mock.yml"])
    def test_shipped_configs_load(self, name: str) -> None:
        Config.from_file(str(ROOT / "configs" / name))
