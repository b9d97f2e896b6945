"""合成切片生成单元测试"""

from __future__ import annotations

import hashlib
from pathlib import Path

import pytest

from slideseek.core.exceptions import ValidationError
from slideseek.core.models import LesionFocus
from slideseek.core.synthetic import (
    DEFAULT_LABELS,
    generate_synthetic,
    load_truth,
    random_slide_spec,
    slide_label,
    spec_from_dict,
    validate_spec,
)
from tests.conftest import small_spec


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestGenerate:
    def test_writes_truth(self, lesion_slide_dir: Path) -> None:
        lesions = load_truth(lesion_slide_dir)
        assert lesions == [LesionFocus(700, 700, 1000, 1000, "adenocarcinoma")]

    def test_byte_identical(self, tmp_path: Path) -> None:
        spec = small_spec("same")
        generate_synthetic(spec, tmp_path / "a")
        generate_synthetic(spec, tmp_path / "b")
        assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")

    def test_invalid_spec_rejected(self, tmp_path: Path) -> None:
        spec = small_spec("bad")
        spec.downsamples = [1, 16, 4]
        with pytest.raises(ValidationError, match="non-monotonic"):
            generate_synthetic(spec, tmp_path / "bad")
        assert not (tmp_path / "bad").exists()

    def test_lesion_outside_tissue(self) -> None:
        spec = small_spec("outside")
        spec.lesion_foci = [LesionFocus(0, 0, 100, 100, "melanoma")]
        assert any("病灶不在组织内" in p for p in validate_spec(spec))

    def test_missing_truth_is_empty(self, tmp_path: Path) -> None:
        assert load_truth(tmp_path) == []


class TestRandomSpec:
    def test_seeded(self) -> None:
        assert random_slide_spec(3) == random_slide_spec(3)
        assert random_slide_spec(3) != random_slide_spec(4)

    @pytest.mark.parametrize("seed", range(10))
    def test_valid_and_single_label(self, seed: int) -> None:
        spec = random_slide_spec(seed)
        assert validate_spec(spec) == []
        assert 1 <= len(spec.lesion_foci) <= 3
        assert len({f.label for f in spec.lesion_foci}) == 1
        assert spec.lesion_foci[0].label in DEFAULT_LABELS
        assert spec.slide_id == f"synth-{seed:04d}"


class TestLabels:
    def test_majority(self) -> None:
        lesions = [LesionFocus(0, 0, 1, 1, "b"), LesionFocus(0, 0, 1, 1, "a"), LesionFocus(0, 0, 1, 1, "b")]
        assert slide_label(lesions) == "b"

    def test_tie_is_lexicographic(self) -> None:
        lesions = [LesionFocus(0, 0, 1, 1, "melanoma"), LesionFocus(0, 0, 1, 1, "adenocarcinoma")]
        assert slide_label(lesions) == "adenocarcinoma"

    def test_no_lesions(self) -> None:
        assert slide_label([]) is None


class TestSpecFromDict:
    def test_converts_nested(self) -> None:
        spec = spec_from_dict({
            "slide_id": "x", "tissue_boxes": [[10, 10, 100, 100]],
            "lesion_foci": [{"x0": 40, "y0": 40, "x1": 60, "y1": 60, "label": "melanoma"}],
            "tissue_rgb": [1, 2, 3],
        })
        assert spec.tissue_boxes == [(10, 10, 100, 100)]
        assert spec.lesion_foci[0].label == "melanoma"
        assert spec.tissue_rgb == (1, 2, 3)

    def test_unknown_field(self) -> None:
        with pytest.raises(ValidationError, match="未知字段"):
            spec_from_dict({"slide_id": "x", "colour": "red"})
