"""CLI：回放命令"""

from __future__ import annotations

import click


def register(group: click.Group) -> None:
    group.add_command(replay)


@click.command()
@click.argument("trace", type=click.Path(exists=True, dir_okay=False))
@click.argument("slide", type=click.Path(exists=True, file_okay=False))
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None,
              help="待比对的 report.json（缺省取 trace 同目录）")
def replay(trace: str, slide: str, report_path: str | None) -> None:
    """回放 trace：结构检查、状态重建、视野重读；mock 后端还会重跑比对"""
    from slideseek.services.replay import replay_trace

    result = replay_trace(trace, slide, report_path=report_path)
    click.echo(f"回放通过: {result.events} 个事件, {result.states} 个状态, {result.views_checked} 个视野")
    if result.rerun:
        click.echo(f"重跑一致: {', '.join(result.compared) or '（无可比对文件）'}")
    else:
        click.echo("仅校验结构（非 mock 后端或探索未完成）")
