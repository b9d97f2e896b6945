"""CLI：探索统计命令"""

from __future__ import annotations

import glob

import click
from rich.console import Console
from rich.table import Table


def register(group: click.Group) -> None:
    group.add_command(stats_cmd)


@click.command(name="stats")
@click.argument("pattern")
@click.option("--high-power", default=10.0, show_default=True, help="高倍下限（倍）")
@click.option("--medium-power", default=2.5, show_default=True, help="中倍下限（倍）")
def stats_cmd(pattern: str, high_power: float, medium_power: float) -> None:
    """汇总匹配 PATTERN 的 trace 中按倍率分档的视野数（均值 ± 标准差）"""
    from slideseek.core.exceptions import DataError
    from slideseek.core.stats import MAG_CLASSES, exploration_summary
    from slideseek.core.trace import read_trace

    paths = sorted(glob.glob(pattern, recursive=True))
    if not paths:
        raise DataError(f"没有匹配的 trace 文件: {pattern}")
    summary = exploration_summary([read_trace(p) for p in paths], high_power=high_power,
                                  medium_power=medium_power)

    table = Table(title=f"探索视野统计（{summary.n} 个 trace）")
    table.add_column("倍率分档")
    table.add_column("均值", justify="right")
    table.add_column("标准差", justify="right")
    for key in (*MAG_CLASSES, "total"):
        table.add_row(key, f"{summary.mean[key]:.2f}", f"{summary.sd[key]:.2f}")
    Console().print(table)
