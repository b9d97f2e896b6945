"""金字塔切片存储

切片目录格式:
  manifest.json                 slide_id / 基准尺寸 / 基准倍率 / mpp / tile_edge / 各层 {downsample, cols, rows}
  level_<k>/tile_<col>_<row>.png  8 位 RGB 无损 tile
  truth.json                    （可选）合成切片的真值病灶

打开后切片只读，可被任意数量的任务并发读取；tile 解码结果由进程级 LRU 缓存共享。
"""

from __future__ import annotations

import hashlib
import io
import logging
import math
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image, ImageDraw

from slideseek.core.exceptions import SlideOpenError, ValidationError
from slideseek.core.models import PyramidLevel, PyramidSlide, RasterImage, RegionSpec
from slideseek.utils.fileio import load_json

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TRUTH_NAME = "truth.json"
STANDARD_MAGNIFICATIONS: tuple[float, ...] = (1.25, 2.5, 5.0, 10.0, 20.0, 40.0)

_MAG_EPS = 1e-6
_OUTLINE_COLORS = {"low": (0, 90, 255), "medium": (255, 140, 0), "high": (0, 170, 0)}


def tile_path(root: str | Path, level: int, col: int, row: int) -> Path:
    return Path(root) / f"level_{level}" / f"tile_{col}_{row}.png"


# =========================================================================
# 打开与校验
# =========================================================================


def _require(data: dict, key: str, where: str) -> Any:
    if key not in data:
        raise SlideOpenError(f"manifest 缺少字段 '{key}' ({where})")
    return data[key]


def _parse_levels(raw: list, width: int, height: int, tile_edge: int) -> tuple[PyramidLevel, ...]:
    if not isinstance(raw, list) or not raw:
        raise SlideOpenError("manifest 中 levels 为空")
    levels: list[PyramidLevel] = []
    for k, entry in enumerate(raw):
        ds = int(_require(entry, "downsample", f"levels[{k}]"))
        cols = int(_require(entry, "cols", f"levels[{k}]"))
        rows = int(_require(entry, "rows", f"levels[{k}]"))
        if k == 0 and ds != 1:
            raise SlideOpenError(f"inconsistent level geometry: level 0 downsample 必须为 1，实际 {ds}")
        if levels and ds <= levels[-1].downsample:
            raise SlideOpenError(
                f"non-monotonic downsamples: {[lv.downsample for lv in levels] + [ds]}",
            )
        lw, lh = math.ceil(width / ds), math.ceil(height / ds)
        if cols != math.ceil(lw / tile_edge) or rows != math.ceil(lh / tile_edge):
            raise SlideOpenError(
                f"inconsistent level geometry: level {k} 期望 {math.ceil(lw / tile_edge)}x"
                f"{math.ceil(lh / tile_edge)} tiles，manifest 声明 {cols}x{rows}",
            )
        levels.append(PyramidLevel(downsample=ds, width=lw, height=lh, cols=cols, rows=rows))
    return tuple(levels)


def _check_tiles(slide: PyramidSlide, decode: bool) -> None:
    """每个被引用的 tile 必须存在且尺寸精确（边缘 tile 等于层余量）"""
    t = slide.tile_edge
    for k, lv in enumerate(slide.levels):
        for row in range(lv.rows):
            for col in range(lv.cols):
                p = tile_path(slide.path, k, col, row)
                rel = f"level_{k}/{p.name}"
                expected = (min(t, lv.width - col * t), min(t, lv.height - row * t))
                try:
                    with Image.open(p) as im:
                        if decode:
                            im.load()
                        size, mode = im.size, im.mode
                except FileNotFoundError as e:
                    raise SlideOpenError(f"unreadable tile: {rel} 不存在") from e
                except OSError as e:
                    raise SlideOpenError(f"unreadable tile: {rel}: {e}") from e
                if mode != "RGB" or size != expected:
                    raise SlideOpenError(
                        f"unreadable tile: {rel} 期望 RGB {expected[0]}x{expected[1]}，实际 {mode} {size[0]}x{size[1]}",
                    )


def open_slide(path: str | Path, *, decode_tiles: bool = True) -> PyramidSlide:
    """打开并校验切片目录

    Raises:
        SlideOpenError: manifest 缺失、层级几何不一致或 tile 不可读
    """
    root = Path(path)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise SlideOpenError(f"manifest not found: {manifest}")
    try:
        data = load_json(manifest)
    except Exception as e:  # noqa: BLE001
        raise SlideOpenError(f"manifest 无法解析: {manifest}: {e}") from e
    if not isinstance(data, dict):
        raise SlideOpenError(f"manifest 顶层必须是对象: {manifest}")

    width = int(_require(data, "base_width", "root"))
    height = int(_require(data, "base_height", "root"))
    tile_edge = int(_require(data, "tile_edge", "root"))
    if width < 1 or height < 1 or tile_edge < 1:
        raise SlideOpenError(f"inconsistent level geometry: 尺寸非法 {width}x{height} tile={tile_edge}")
    mpp = data.get("mpp")
    slide = PyramidSlide(
        slide_id=str(_require(data, "slide_id", "root")),
        path=str(root.resolve()),
        base_width=width,
        base_height=height,
        base_magnification=float(_require(data, "base_magnification", "root")),
        tile_edge=tile_edge,
        levels=_parse_levels(_require(data, "levels", "root"), width, height, tile_edge),
        mpp=None if mpp is None else float(mpp),
    )
    _check_tiles(slide, decode=decode_tiles)
    logger.info(
        "切片已打开: %s (%dx%d @%.4gx, %d 层)",
        slide.slide_id, width, height, slide.base_magnification, len(slide.levels),
    )
    return slide


def manifest_dict(slide_id: str, width: int, height: int, base_magnification: float,
                  mpp: float | None, tile_edge: int, downsamples: list[int]) -> dict[str, Any]:
    """构造 manifest 内容（generate_synthetic 使用）"""
    levels = []
    for ds in downsamples:
        lw, lh = math.ceil(width / ds), math.ceil(height / ds)
        levels.append({"downsample": ds, "cols": math.ceil(lw / tile_edge), "rows": math.ceil(lh / tile_edge)})
    return {
        "slide_id": slide_id,
        "base_width": width,
        "base_height": height,
        "base_magnification": base_magnification,
        "mpp": mpp,
        "tile_edge": tile_edge,
        "levels": levels,
    }


# =========================================================================
# 像素读取
# =========================================================================


@lru_cache(maxsize=1024)
def _decode_tile(path: str, stamp: tuple[int, int, int]) -> RasterImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    arr.setflags(write=False)
    return arr


def _load_tile(root: str, level: int, col: int, row: int) -> RasterImage:
    """缓存键包含文件的 mtime / 大小 / inode，同一路径重写后读到的是新像素"""
    path = tile_path(root, level, col, row)
    try:
        st = path.stat()
    except OSError as e:
        raise SlideOpenError(f"unreadable tile: level_{level}/{path.name}: {e}") from e
    return _decode_tile(str(path), (st.st_mtime_ns, st.st_size, st.st_ino))


def clear_tile_cache() -> None:
    _decode_tile.cache_clear()


def read_level_window(slide: PyramidSlide, level: int, x0: int, y0: int, x1: int, y1: int) -> RasterImage:
    """按层坐标拼接 tile 马赛克 [x0, x1) x [y0, y1)"""
    lv = slide.levels[level]
    if not (0 <= x0 < x1 <= lv.width and 0 <= y0 < y1 <= lv.height):
        raise ValidationError(f"region out of bounds: level {level} 窗口 ({x0},{y0},{x1},{y1})")
    t = slide.tile_edge
    out = np.empty((y1 - y0, x1 - x0, 3), dtype=np.uint8)
    for row in range(y0 // t, (y1 - 1) // t + 1):
        for col in range(x0 // t, (x1 - 1) // t + 1):
            tile = _load_tile(slide.path, level, col, row)
            tx0, ty0 = col * t, row * t
            sx0, sy0 = max(x0, tx0), max(y0, ty0)
            sx1, sy1 = min(x1, tx0 + tile.shape[1]), min(y1, ty0 + tile.shape[0])
            out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = tile[sy0 - ty0:sy1 - ty0, sx0 - tx0:sx1 - tx0]
    return out


def read_level(slide: PyramidSlide, level: int) -> RasterImage:
    lv = slide.levels[level]
    return read_level_window(slide, level, 0, 0, lv.width, lv.height)


def box_downsample(image: RasterImage, factor: int) -> RasterImage:
    """精确面积平均降采样（四舍五入），边缘不足 factor 的块按实际像素数平均"""
    if factor == 1:
        return image.copy()
    h, w = image.shape[:2]
    oh, ow = math.ceil(h / factor), math.ceil(w / factor)
    padded = np.zeros((oh * factor, ow * factor, 3), dtype=np.int64)
    padded[:h, :w] = image
    mask = np.zeros((oh * factor, ow * factor), dtype=np.int64)
    mask[:h, :w] = 1
    sums = padded.reshape(oh, factor, ow, factor, 3).sum(axis=(1, 3))
    counts = mask.reshape(oh, factor, ow, factor).sum(axis=(1, 3))[..., None]
    return ((sums + counts // 2) // counts).astype(np.uint8)


def check_region(slide: PyramidSlide, region: RegionSpec, allowed: list[float] | None = None) -> list[str]:
    """返回区域的全部违例（空列表表示合法）"""
    problems: list[str] = []
    if not (0 <= region.x0 < region.x1 <= slide.base_width and 0 <= region.y0 < region.y1 <= slide.base_height):
        problems.append(
            f"region out of bounds: ({region.x0},{region.y0},{region.x1},{region.y1}) "
            f"超出 {slide.base_width}x{slide.base_height}",
        )
    mags = slide.allowed_magnifications(list(allowed or STANDARD_MAGNIFICATIONS))
    if not any(abs(region.magnification - m) < _MAG_EPS for m in mags):
        problems.append(f"unsupported magnification: {region.magnification:g}x 不在 {mags} 中")
    return problems


def select_level(slide: PyramidSlide, magnification: float) -> int:
    """下采样倍数不超过 base/mag 的最深层"""
    ratio = slide.base_magnification / magnification
    best = 0
    for k, lv in enumerate(slide.levels):
        if lv.downsample <= ratio + _MAG_EPS:
            best = k
    return best


def output_size(region: RegionSpec, base_magnification: float, max_edge: int) -> tuple[int, int]:
    """输出尺寸 = 区域尺寸 × (mag/base)，再等比缩放到长边 <= max_edge"""
    scale = region.magnification / base_magnification
    w = max(1, math.floor(region.width * scale + 0.5))
    h = max(1, math.floor(region.height * scale + 0.5))
    if max(w, h) > max_edge:
        shrink = max_edge / max(w, h)
        w = max(1, math.floor(w * shrink + 0.5))
        h = max(1, math.floor(h * shrink + 0.5))
    return w, h


def read_region(
    slide: PyramidSlide,
    region: RegionSpec,
    max_edge: int,
    *,
    level: int | None = None,
    allowed: list[float] | None = None,
) -> RasterImage:
    """按请求倍率读取区域

    对齐且整数倍时用精确面积平均，否则用 Pillow 双线性配合小数源框。

    Raises:
        ValidationError: 区域越界或倍率不受支持
    """
    problems = check_region(slide, region, allowed)
    if problems:
        raise ValidationError(problems[0], details=problems)
    lvl = select_level(slide, region.magnification) if level is None else level
    ds = slide.levels[lvl].downsample
    if ds > slide.base_magnification / region.magnification + _MAG_EPS:
        raise ValidationError(f"level {lvl} 的下采样 {ds} 超过 {region.magnification:g}x 所需比例")
    out_w, out_h = output_size(region, slide.base_magnification, max_edge)

    lv = slide.levels[lvl]
    cx0, cy0 = region.x0 // ds, region.y0 // ds
    cx1, cy1 = min(lv.width, math.ceil(region.x1 / ds)), min(lv.height, math.ceil(region.y1 / ds))
    crop = read_level_window(slide, lvl, cx0, cy0, cx1, cy1)

    aligned = all(v % ds == 0 for v in (region.x0, region.y0, region.x1, region.y1))
    cw, ch = cx1 - cx0, cy1 - cy0
    if aligned and cw % out_w == 0 and ch % out_h == 0 and cw // out_w == ch // out_h:
        return box_downsample(crop, cw // out_w)

    src_box = (region.x0 / ds - cx0, region.y0 / ds - cy0, region.x1 / ds - cx0, region.y1 / ds - cy0)
    resized = Image.fromarray(crop).resize((out_w, out_h), Image.Resampling.BILINEAR, box=src_box)
    return np.asarray(resized, dtype=np.uint8)


# =========================================================================
# 缩略图与编码
# =========================================================================


def _magnification_class(magnification: float, high_power: float, medium_power: float) -> str:
    if magnification >= high_power:
        return "high"
    if magnification >= medium_power:
        return "medium"
    return "low"


def thumbnail_size(slide: PyramidSlide, edge: int) -> tuple[int, int]:
    scale = edge / max(slide.base_width, slide.base_height)
    return (max(1, math.floor(slide.base_width * scale + 0.5)), max(1, math.floor(slide.base_height * scale + 0.5)))


def render_thumbnail(
    slide: PyramidSlide,
    visited: list[RegionSpec],
    edge: int,
    *,
    high_power: float = 10.0,
    medium_power: float = 2.5,
) -> RasterImage:
    """等比缩略图（长边 = edge），已访问区域按倍率分档描边"""
    if edge < 64:
        raise ValidationError(f"缩略图边长必须 >= 64: {edge}")
    tw, th = thumbnail_size(slide, edge)
    level = 0
    for k, lv in enumerate(slide.levels):
        if lv.width >= tw and lv.height >= th:
            level = k
    base = read_level(slide, level)
    pil = Image.fromarray(base)
    if pil.size != (tw, th):
        pil = pil.resize((tw, th), Image.Resampling.BOX)

    sx, sy = tw / slide.base_width, th / slide.base_height
    draw = ImageDraw.Draw(pil)
    width = max(1, edge // 512)
    for r in visited:
        x0, y0 = math.floor(r.x0 * sx), math.floor(r.y0 * sy)
        x1 = max(x0, min(tw, math.ceil(r.x1 * sx)) - 1)
        y1 = max(y0, min(th, math.ceil(r.y1 * sy)) - 1)
        color = _OUTLINE_COLORS[_magnification_class(r.magnification, high_power, medium_power)]
        draw.rectangle((x0, y0, x1, y1), outline=color, width=width)
    return np.asarray(pil, dtype=np.uint8)


def encode_png(image: RasterImage) -> bytes:
    """无元数据的确定性 PNG 编码"""
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def image_digest(image: RasterImage) -> str:
    """像素摘要：形状 + 原始字节的 sha256"""
    h = hashlib.sha256(f"{image.shape[0]}x{image.shape[1]}x{image.shape[2]}:".encode())
    h.update(np.ascontiguousarray(image).tobytes())
    return h.hexdigest()
