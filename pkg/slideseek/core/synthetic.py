"""合成切片生成

以种子确定的方式渲染“组织椭圆 + 病灶椭圆”的 RGB 图像，按面积平均生成各层，
写出 PNG tile、manifest.json 和 truth.json。相同规格与种子得到字节一致的目录。
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
from PIL import Image

from slideseek.core.exceptions import DataError, ValidationError
from slideseek.core.models import LesionFocus, PyramidSlide, RasterImage, SyntheticSlideSpec
from slideseek.core.slide_store import (
    MANIFEST_NAME,
    TRUTH_NAME,
    box_downsample,
    clear_tile_cache,
    manifest_dict,
    open_slide,
    tile_path,
)
from slideseek.utils.fileio import load_json, save_json

logger = logging.getLogger(__name__)

_TEXTURE_CELL = 16
DEFAULT_LABELS = ("invasive ductal carcinoma", "adenocarcinoma", "squamous cell carcinoma", "melanoma")


def _inside_ellipse(px: float, py: float, box: tuple[int, int, int, int]) -> bool:
    x0, y0, x1, y1 = box
    a, b = (x1 - x0) / 2, (y1 - y0) / 2
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    return ((px - cx) / a) ** 2 + ((py - cy) / b) ** 2 <= 1.0


def validate_spec(spec: SyntheticSlideSpec) -> list[str]:
    """返回规格的全部违例"""
    problems: list[str] = []
    if spec.width < 1 or spec.height < 1 or spec.tile_edge < 1:
        problems.append(f"尺寸非法: {spec.width}x{spec.height} tile={spec.tile_edge}")
    ds = spec.downsamples
    if not ds or ds[0] != 1 or any(b <= a for a, b in zip(ds, ds[1:])):
        problems.append(f"non-monotonic downsamples: {ds}")
    for box in spec.tissue_boxes:
        x0, y0, x1, y1 = box
        if not (0 <= x0 < x1 <= spec.width and 0 <= y0 < y1 <= spec.height):
            problems.append(f"组织框越界: {box}")
    for focus in spec.lesion_foci:
        corners = [(focus.x0, focus.y0), (focus.x1, focus.y0), (focus.x0, focus.y1), (focus.x1, focus.y1)]
        if not any(all(_inside_ellipse(px, py, box) for px, py in corners) for box in spec.tissue_boxes):
            problems.append(f"病灶不在组织内: {focus.to_dict()}")
    return problems


def _ellipse_mask(h: int, w: int) -> np.ndarray:
    yy = (np.arange(h) + 0.5 - h / 2) / (h / 2)
    xx = (np.arange(w) + 0.5 - w / 2) / (w / 2)
    return (yy[:, None] ** 2 + xx[None, :] ** 2) <= 1.0


def _paint(img: np.ndarray, box: tuple[int, int, int, int], rgb: tuple[int, int, int],
           amplitude: int, rng: np.random.Generator) -> None:
    x0, y0, x1, y1 = box
    h, w = y1 - y0, x1 - x0
    coarse = rng.integers(-amplitude, amplitude + 1,
                          size=(h // _TEXTURE_CELL + 1, w // _TEXTURE_CELL + 1, 1), dtype=np.int16)
    texture = np.repeat(np.repeat(coarse, _TEXTURE_CELL, axis=0), _TEXTURE_CELL, axis=1)[:h, :w]
    color = np.clip(np.array(rgb, dtype=np.int16) + texture, 0, 255).astype(np.uint8)
    mask = _ellipse_mask(h, w)
    view = img[y0:y1, x0:x1]
    view[mask] = color[mask]


def render(spec: SyntheticSlideSpec) -> RasterImage:
    """渲染基准层图像"""
    rng = np.random.default_rng(spec.rng_seed)
    noise = rng.integers(-spec.background_noise, spec.background_noise + 1,
                         size=(spec.height, spec.width, 1), dtype=np.int16)
    img = np.clip(np.array(spec.background_rgb, dtype=np.int16) + noise, 0, 255).astype(np.uint8)
    for box in spec.tissue_boxes:
        _paint(img, box, spec.tissue_rgb, spec.texture_amplitude, rng)
    for focus in spec.lesion_foci:
        _paint(img, (focus.x0, focus.y0, focus.x1, focus.y1), spec.lesion_rgb, spec.texture_amplitude, rng)
    return img


def _write_level(root: Path, k: int, level_img: RasterImage, tile_edge: int) -> None:
    h, w = level_img.shape[:2]
    for row in range(math.ceil(h / tile_edge)):
        for col in range(math.ceil(w / tile_edge)):
            tile = level_img[row * tile_edge:(row + 1) * tile_edge, col * tile_edge:(col + 1) * tile_edge]
            p = tile_path(root, k, col, row)
            p.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(np.ascontiguousarray(tile)).save(p, format="PNG", compress_level=6)


def generate_synthetic(spec: SyntheticSlideSpec, out: str | Path) -> PyramidSlide:
    """写出合成切片目录并重新打开校验

    Raises:
        ValidationError: 规格无效
        DataError: 输出目录不可写
    """
    problems = validate_spec(spec)
    if problems:
        raise ValidationError(f"合成切片规格无效: {problems[0]}", details=problems)
    root = Path(out)
    img = render(spec)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for k, ds in enumerate(spec.downsamples):
            _write_level(root, k, box_downsample(img, ds), spec.tile_edge)
        save_json(root / MANIFEST_NAME, manifest_dict(
            spec.slide_id, spec.width, spec.height, spec.base_magnification,
            spec.mpp, spec.tile_edge, list(spec.downsamples),
        ))
        save_json(root / TRUTH_NAME, {
            "slide_id": spec.slide_id,
            "tissue": [list(b) for b in spec.tissue_boxes],
            "lesions": [f.to_dict() for f in spec.lesion_foci],
        })
    except OSError as e:
        raise DataError(f"无法写入切片目录 {root}: {e}") from e
    clear_tile_cache()
    logger.info("合成切片已生成: %s -> %s (%d 个病灶)", spec.slide_id, root, len(spec.lesion_foci))
    return open_slide(root)


def load_truth(slide_dir: str | Path) -> list[LesionFocus]:
    """读取 truth.json 中的病灶；不存在时返回空列表"""
    p = Path(slide_dir) / TRUTH_NAME
    if not p.is_file():
        return []
    data = load_json(p)
    return [LesionFocus.from_dict(d) for d in data.get("lesions", [])]


def slide_label(lesions: list[LesionFocus]) -> str | None:
    """切片级真值标签：病灶标签多数票，平票取字典序最小"""
    if not lesions:
        return None
    counts: dict[str, int] = {}
    for f in lesions:
        counts[f.label] = counts.get(f.label, 0) + 1
    return min(counts, key=lambda lbl: (-counts[lbl], lbl))


def _place_lesion(rng: np.random.Generator, tissue: tuple[int, int, int, int], size: int,
                  placed: list[LesionFocus], label: str) -> LesionFocus | None:
    lo, hi = size // 16, size // 8
    for _ in range(200):
        w, h = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
        x0 = int(rng.integers(tissue[0], tissue[2] - w))
        y0 = int(rng.integers(tissue[1], tissue[3] - h))
        cand = LesionFocus(x0, y0, x0 + w, y0 + h, label)
        corners = [(cand.x0, cand.y0), (cand.x1, cand.y0), (cand.x0, cand.y1), (cand.x1, cand.y1)]
        if not all(_inside_ellipse(px, py, tissue) for px, py in corners):
            continue
        gap = size // 64
        if any(cand.x0 < f.x1 + gap and f.x0 < cand.x1 + gap and cand.y0 < f.y1 + gap and f.y0 < cand.y1 + gap
               for f in placed):
            continue
        return cand
    return None


def random_slide_spec(
    seed: int,
    *,
    size: int = 4096,
    max_lesions: int = 3,
    labels: tuple[str, ...] | list[str] = DEFAULT_LABELS,
    tile_edge: int = 512,
) -> SyntheticSlideSpec:
    """种子确定的随机规格：一个居中的大组织椭圆，1..max_lesions 个同标签病灶"""
    rng = np.random.default_rng(seed)
    ra = int(size * rng.uniform(0.38, 0.46))
    rb = int(size * rng.uniform(0.38, 0.46))
    jx, jy = max(0, size // 2 - ra - 8), max(0, size // 2 - rb - 8)
    cx = size // 2 + int(rng.integers(-jx, jx + 1))
    cy = size // 2 + int(rng.integers(-jy, jy + 1))
    tissue = (cx - ra, cy - rb, cx + ra, cy + rb)
    label = str(labels[int(rng.integers(len(labels)))])
    placed: list[LesionFocus] = []
    for _ in range(int(rng.integers(1, max_lesions + 1))):
        focus = _place_lesion(rng, tissue, size, placed, label)
        if focus is not None:
            placed.append(focus)
    return SyntheticSlideSpec(
        slide_id=f"synth-{seed:04d}",
        width=size,
        height=size,
        tile_edge=tile_edge,
        tissue_boxes=[tissue],
        lesion_foci=placed,
        rng_seed=seed,
    )


def spec_from_dict(data: dict) -> SyntheticSlideSpec:
    """从 YAML/JSON 映射构造规格（cmd_synth 使用）"""
    known = set(SyntheticSlideSpec.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"合成切片规格包含未知字段: {unknown}")
    kwargs = dict(data)
    if "tissue_boxes" in kwargs:
        kwargs["tissue_boxes"] = [tuple(int(v) for v in b) for b in kwargs["tissue_boxes"]]
    if "lesion_foci" in kwargs:
        kwargs["lesion_foci"] = [LesionFocus.from_dict(f) for f in kwargs["lesion_foci"]]
    for key in ("background_rgb", "tissue_rgb", "lesion_rgb"):
        if key in kwargs:
            kwargs[key] = tuple(int(v) for v in kwargs[key])
    return SyntheticSlideSpec(**kwargs)
