"""CLI：探索命令"""

from __future__ import annotations

import click


def register(group: click.Group) -> None:
    group.add_command(explore)


@click.command()
@click.argument("slide", type=click.Path(exists=True, file_okay=False))
@click.option("--config", "-c", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="配置文件路径（缺省使用内置默认值）")
@click.option("--out", "-o", required=True, help="输出目录")
@click.option("--context", default="", help="临床背景（标准化任务描述）")
@click.option("--seed", type=int, default=None, help="随机种子")
@click.option("--backend", type=click.Choice(["mock", "http"]), default=None, help="覆盖配置中的后端")
@click.option("--max-rounds", type=int, default=None, help="覆盖最大轮次")
@click.option("--parallel", "-p", type=int, default=None, help="每轮并行度（0 = 本轮任务数）")
@click.option("--mode", type=click.Choice(["multi_agent", "single_agent"]), default=None, help="探索模式")
def explore(
    slide: str, config_path: str | None, out: str, context: str, seed: int | None,
    backend: str | None, max_rounds: int | None, parallel: int | None, mode: str | None,
) -> None:
    """对一张切片执行多智能体探索，写出 trace 与诊断报告"""
    from slideseek.core.config import Config
    from slideseek.services.container import ServiceContainer
    from slideseek.services.exploration_orchestrator import ExplorationOrchestrator, ExplorationPlan

    cfg = Config.from_file(config_path) if config_path else Config()
    cfg = cfg.with_overrides(seed=seed, backend=backend, max_rounds=max_rounds, parallelism=parallel, mode=mode)
    container = ServiceContainer(config=cfg)
    try:
        result = ExplorationOrchestrator(container).run(ExplorationPlan(slide_path=slide, out_dir=out,
                                                                        context=context))
    finally:
        container.close()
    report = result.report
    assert report is not None
    click.echo(f"Primary diagnosis: {report.primary_diagnosis}")
    click.echo(f"Differentials:     {'; '.join(report.differentials)}")
    click.echo(f"Confidence:        {report.confidence.value}")
    click.echo(f"轮次 {report.rounds}，视野 {report.views}，引用 ROI {len(report.cited_rois)} 个 -> {out}")
