"""AnyRes 切块规划单元测试"""

from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from slideseek.core.anyres import (
    IMAGE_TOKEN,
    NEWLINE_TOKEN,
    TILE_EDGE,
    plan_grid,
    request_token_plan,
    serialize_placeholders,
    tile_image,
    token_count,
)
from slideseek.core.exceptions import ValidationError
from slideseek.core.models import RasterImage


class TestTokenCount:
    @pytest.mark.parametrize(("w", "h", "tokens"), [
        (448, 448, 128),
        (896, 896, 640),
        (449, 448, 384),
        (448, 449, 384),
        (1, 1, 128),
        (1024, 1024, 640),
        (2000, 100, 384),
    ])
    def test_anchor_points(self, w: int, h: int, tokens: int) -> None:
        assert token_count(w, h) == tokens

    def test_sampled_sweep(self) -> None:
        rng = np.random.default_rng(0)
        dims = rng.integers(1, 1025, size=(4096, 2))
        counts = {token_count(int(w), int(h)) for w, h in dims}
        assert counts <= {128, 384, 640}

    def test_monotone_without_rescale(self) -> None:
        edges = range(1, 897)
        table = np.array([[token_count(w, h) for w in edges] for h in edges])
        assert (np.diff(table, axis=0) >= 0).all()
        assert (np.diff(table, axis=1) >= 0).all()

    def test_rescale_can_shrink_grid(self) -> None:
        # 长边越过 896 后短边按比例缩小，列数可能从 2 掉到 1
        assert token_count(449, 896) == 640
        assert plan_grid(449, 897).scaled_width == 448
        assert token_count(449, 897) == 384

    def test_invalid_size(self) -> None:
        with pytest.raises(ValidationError):
            plan_grid(0, 10)


def _stitch(tiles: list[RasterImage], cols: int) -> RasterImage:
    rows = [np.hstack(tiles[i:i + cols]) for i in range(0, len(tiles), cols)]
    return np.vstack(rows)


class TestTileImage:
    def test_single_tile_no_thumbnail(self) -> None:
        seq = tile_image(np.full((300, 200, 3), 7, dtype=np.uint8))
        assert seq.thumbnail is None
        assert len(seq.tiles) == 1
        tile = seq.tiles[0]
        assert tile.shape == (TILE_EDGE, TILE_EDGE, 3)
        assert int(tile[299, 199, 0]) == 7
        assert int(tile[300, 0].sum()) == 0 and int(tile[0, 200].sum()) == 0

    def test_wide_image_grid(self) -> None:
        seq = tile_image(np.zeros((400, 800, 3), dtype=np.uint8))
        assert (seq.plan.grid_cols, seq.plan.grid_rows) == (2, 1)
        assert seq.thumbnail is not None and seq.thumbnail.shape == (TILE_EDGE, TILE_EDGE, 3)
        assert len(seq.ordered()) == 3
        assert seq.token_count == 384

    def test_downscale_then_grid(self) -> None:
        seq = tile_image(np.zeros((1000, 1792, 3), dtype=np.uint8))
        assert (seq.plan.scaled_width, seq.plan.scaled_height) == (896, 500)
        assert (seq.plan.grid_cols, seq.plan.grid_rows) == (2, 2)

    @pytest.mark.parametrize(("h", "w"), [(500, 600), (448, 449), (896, 896)])
    def test_tiles_reassemble_to_padded_image(self, h: int, w: int) -> None:
        img = np.random.default_rng(h * w).integers(1, 256, size=(h, w, 3), dtype=np.uint8)
        seq = tile_image(img)
        canvas = _stitch(seq.tiles, seq.plan.grid_cols)
        assert canvas.shape == (seq.plan.padded_height, seq.plan.padded_width, 3)
        assert np.array_equal(canvas[:h, :w], img)
        assert not canvas[h:].any() and not canvas[:, w:].any()

    def test_tiles_reassemble_to_resized_image(self) -> None:
        img = np.random.default_rng(7).integers(1, 256, size=(700, 1500, 3), dtype=np.uint8)
        seq = tile_image(img)
        sw, sh = seq.plan.scaled_width, seq.plan.scaled_height
        assert (sw, sh) == (896, 418)
        resized = np.asarray(Image.fromarray(img).resize((sw, sh), Image.Resampling.BILINEAR))
        canvas = _stitch(seq.tiles, seq.plan.grid_cols)
        assert np.array_equal(canvas[:sh, :sw], resized)
        assert not canvas[sh:].any()


class TestPlaceholders:
    def test_newline_between_images(self) -> None:
        seq = serialize_placeholders([(448, 448), (896, 896)])
        assert len(seq) == 128 + 1 + 640
        assert seq[128] == NEWLINE_TOKEN
        assert seq.count(IMAGE_TOKEN) == 768

    def test_request_plan(self) -> None:
        plan = request_token_plan([(448, 448), (449, 448), (896, 896)])
        assert plan == {"per_image": [128, 384, 640], "newline_markers": 2, "total": 1154}

    def test_empty_request(self) -> None:
        assert request_token_plan([]) == {"per_image": [], "newline_markers": 0, "total": 0}
