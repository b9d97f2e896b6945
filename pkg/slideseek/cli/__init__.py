"""slideseek 命令行接口

CLI 按领域拆分为子模块，每个模块注册自己的命令到 main group。
退出码：0 成功；1 校验失败；2 I/O 或配置错误。诊断信息输出到 stderr。
"""

import os
from typing import Any

import click

from slideseek import __version__
from slideseek.core.exceptions import (
    BackendError,
    ConfigError,
    DataError,
    DecisionError,
    PlanningError,
    ProtocolError,
    ReplayMismatchError,
    SlideSeekError,
    ValidationError,
)
from slideseek.utils.logger import setup_logging

EXIT_VALIDATION = 1
EXIT_IO = 2

_VALIDATION_ERRORS = (ValidationError, ProtocolError, DecisionError, PlanningError, ReplayMismatchError)
_IO_ERRORS = (ConfigError, DataError, BackendError, OSError)


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, _VALIDATION_ERRORS):
        return EXIT_VALIDATION
    if isinstance(error, _IO_ERRORS):
        return EXIT_IO
    return EXIT_VALIDATION


def _fail(ctx: click.Context, error: Exception) -> None:
    code = error.code if isinstance(error, SlideSeekError) else type(error).__name__
    click.echo(f"错误 [{code}]: {error}", err=True)
    for detail in getattr(error, "details", [])[:20]:
        click.echo(f"  - {detail}", err=True)
    ctx.exit(exit_code_for(error))


class ExitCodeGroup(click.Group):
    """把业务异常映射为约定的退出码"""

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except (*_VALIDATION_ERRORS, *_IO_ERRORS) as e:
            _fail(ctx, e)
            return None


@click.group(cls=ExitCodeGroup)
@click.version_option(version=__version__)
def main() -> None:
    """slideseek - 多智能体全切片病理探索引擎"""
    setup_logging(
        level=os.getenv("SLIDESEEK_LOG_LEVEL", "INFO"),
        json_output=os.getenv("SLIDESEEK_LOG_JSON", "") == "1",
    )


# 注册各领域子命令
from slideseek.cli.cmd_eval import register as _reg_eval  # noqa: E402
from slideseek.cli.cmd_explore import register as _reg_explore  # noqa: E402
from slideseek.cli.cmd_replay import register as _reg_replay  # noqa: E402
from slideseek.cli.cmd_stats import register as _reg_stats  # noqa: E402
from slideseek.cli.cmd_synth import register as _reg_synth  # noqa: E402

_reg_synth(main)
_reg_explore(main)
_reg_replay(main)
_reg_eval(main)
_reg_stats(main)
