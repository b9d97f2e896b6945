"""CLI：合成切片命令"""

from __future__ import annotations

from pathlib import Path

import click


def register(group: click.Group) -> None:
    group.add_command(synth)
    group.add_command(synth_random)


@click.command()
@click.argument("spec", type=click.Path(exists=True, dir_okay=False))
@click.argument("out")
@click.option("--seed", type=int, default=None, help="覆盖规格中的纹理随机种子")
def synth(spec: str, out: str, seed: int | None) -> None:
    """按 YAML 规格生成一张合成金字塔切片"""
    from slideseek.core.synthetic import generate_synthetic, spec_from_dict
    from slideseek.utils.fileio import load_yaml

    slide_spec = spec_from_dict(load_yaml(spec))
    if seed is not None:
        slide_spec.rng_seed = seed
    slide = generate_synthetic(slide_spec, out)
    click.echo(f"已生成: {slide.slide_id} ({slide.base_width}x{slide.base_height}, "
               f"{len(slide.levels)} 层, {len(slide_spec.lesion_foci)} 个病灶) -> {out}")


@click.command(name="synth-random")
@click.argument("out")
@click.option("--count", "-n", default=1, show_default=True, help="生成的切片数")
@click.option("--seed", "start_seed", default=0, show_default=True, help="首张切片的种子，其余依次加一")
@click.option("--size", default=4096, show_default=True, help="切片边长（基准层像素）")
@click.option("--max-lesions", default=3, show_default=True, help="每张切片的最大病灶数")
def synth_random(out: str, count: int, start_seed: int, size: int, max_lesions: int) -> None:
    """按种子批量生成随机合成切片（OUT/synth-NNNN）"""
    from slideseek.core.synthetic import generate_synthetic, random_slide_spec

    for seed in range(start_seed, start_seed + count):
        spec = random_slide_spec(seed, size=size, max_lesions=max_lesions)
        generate_synthetic(spec, Path(out) / spec.slide_id)
        click.echo(f"{spec.slide_id}: {len(spec.lesion_foci)} 个病灶")
