"""CLI：评估命令"""

from __future__ import annotations

from typing import Any

import click

from slideseek.core.models import OutcomeRecord, StatResult


def register(group: click.Group) -> None:
    group.add_command(eval_cmd)


def _row(metric: str, stratum: str, r: StatResult) -> dict[str, Any]:
    return {"metric": metric, "stratum": stratum, **r.to_dict()}


def _echo_row(row: dict[str, Any]) -> None:
    click.echo(f"{row['metric']:<6} {row['stratum']:<10} {row['point']:.3f} "
               f"[{row['ci_low']:.3f}, {row['ci_high']:.3f}] n={row['n']}")


def evaluate(records: list[OutcomeRecord], k: int, *, seed: int, replicates: int,
             permutations: int) -> tuple[list[dict[str, Any]], dict[str, float]]:
    """top-k 总体准确率、按置信度与罕见度分层的 top-1 准确率及分层间的非配对检验"""
    from slideseek.core import stats

    rows = [_row(f"top{k}", "all", stats.topk_accuracy(records, k, replicates=replicates, seed=seed))]
    pvalues: dict[str, float] = {}
    by_conf = stats.confidence_stratified_accuracy(records, replicates=replicates, seed=seed)
    rows.extend(_row("top1", name, r) for name, r in by_conf.items())
    if len(by_conf) == 2:
        pvalues["confidence High vs Low"] = stats.compare_strata(
            records, "confidence", "High", "Low", permutations=permutations, seed=seed,
        )
    if any(r.rarity is not None for r in records):
        by_rarity = stats.stratified_accuracy(records, "rarity", replicates=replicates, seed=seed)
        rows.extend(_row("top1", name, r) for name, r in by_rarity.items())
        if {"common", "rare"} <= set(by_rarity):
            pvalues["rarity common vs rare"] = stats.compare_strata(
                records, "rarity", "common", "rare", permutations=permutations, seed=seed,
            )
    return rows, pvalues


@click.command(name="eval")
@click.argument("outcomes", type=click.Path(exists=True, dir_okay=False))
@click.option("--k", "k", type=click.Choice(["1", "3"]), default="1", show_default=True, help="top-k")
@click.option("--seed", default=0, show_default=True, help="bootstrap / 置换检验种子")
@click.option("--replicates", default=1000, show_default=True, help="bootstrap 重采样次数")
@click.option("--permutations", default=1000, show_default=True, help="置换次数")
@click.option("--compare", "other", type=click.Path(exists=True, dir_okay=False), default=None,
              help="另一系统的结果文件（按 case_id 配对检验）")
@click.option("--out", "out_dir", default=None, help="写出 results.csv 与 summary.json 的目录")
def eval_cmd(outcomes: str, k: str, seed: int, replicates: int, permutations: int,
             other: str | None, out_dir: str | None) -> None:
    """评估结果文件：top-k 准确率、95% CI、分层准确率与置换检验"""
    from slideseek.core import stats
    from slideseek.core.reporter import write_eval_outputs

    records = stats.load_outcomes(outcomes)
    rows, pvalues = evaluate(records, int(k), seed=seed, replicates=replicates, permutations=permutations)
    if other is not None:
        pairs = stats.pair_records(records, stats.load_outcomes(other))
        ours = stats.topk_hits([a for a, _ in pairs], int(k))
        theirs = stats.topk_hits([b for _, b in pairs], int(k))
        rows.append(_row(f"top{k}", "compare", stats.bootstrap_ci(theirs, replicates=replicates, seed=seed)))
        pvalues[f"paired top{k} vs compare"] = stats.paired_permutation_pvalue(
            ours, theirs, permutations=permutations, seed=seed,
        )
    for row in rows:
        _echo_row(row)
    for name, p in pvalues.items():
        click.echo(f"p({name}) = {p:.4f}")
    if out_dir:
        summary = {"outcomes": outcomes, "k": int(k), "rows": rows, "pvalues": pvalues}
        paths = write_eval_outputs(rows, summary, out_dir)
        click.echo(f"已写出: {', '.join(str(p) for p in paths)}")
