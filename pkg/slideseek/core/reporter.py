"""报告生成器 - Strategy 模式

诊断报告的每种输出格式实现 ReportFormatter 接口，通过注册制工厂调用；
新增格式只需继承 ReportFormatter 并注册即可。另提供评估结果表（CSV）与汇总（JSON）的写出。
输出不含时间戳，相同报告得到字节一致的文件。
"""

from __future__ import annotations

import csv
import io
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any

from slideseek.core.models import DiagnosisReport
from slideseek.utils.fileio import atomic_write, dump_json

logger = logging.getLogger(__name__)


# =========================================================================
# Strategy: ReportFormatter
# =========================================================================


class ReportFormatter(ABC):
    """报告格式化策略基类"""

    @abstractmethod
    def format(self, report: DiagnosisReport) -> str:
        """将诊断报告格式化为字符串"""

    @abstractmethod
    def filename(self) -> str:
        """输出文件名"""


class JSONReportFormatter(ReportFormatter):
    def format(self, report: DiagnosisReport) -> str:
        return dump_json(report.to_dict())

    def filename(self) -> str:
        return "report.json"


class MarkdownReportFormatter(ReportFormatter):
    def format(self, report: DiagnosisReport) -> str:
        lines = [
            f"# 诊断报告: {report.slide_id}",
            "",
            f"- **Primary diagnosis**: {report.primary_diagnosis}",
            f"- **Differentials**: {report.differentials[0]}; {report.differentials[1]}",
            f"- **Confidence**: {report.confidence.value}",
            f"- 探索轮次: {report.rounds}，视野数: {report.views}",
            "",
            "## 叙述",
            "",
            report.narrative,
            "",
            "## 引用的 ROI",
            "",
        ]
        if not report.cited_rois:
            lines.append("（无）")
        else:
            lines.append("| ROI | 区域 (x0,y0,x1,y1) | 倍率 | 描述 |")
            lines.append("|---|---|---|---|")
            for roi in report.cited_rois:
                r = roi.region
                caption = roi.caption.replace("|", "\\|").replace("\n", " ")
                lines.append(f"| {roi.roi_id} | ({r.x0},{r.y0},{r.x1},{r.y1}) | {r.magnification:g}x | {caption} |")
        return "\n".join(lines) + "\n"

    def filename(self) -> str:
        return "report.md"


_formatters: dict[str, type[ReportFormatter]] = {
    "json": JSONReportFormatter,
    "md": MarkdownReportFormatter,
}


def register_formatter(name: str, cls: type[ReportFormatter]) -> None:
    """注册自定义报告格式"""
    _formatters[name] = cls


def write_reports(report: DiagnosisReport, out_dir: str | Path, formats: tuple[str, ...] = ("md", "json")) -> list[Path]:
    """写出诊断报告，返回文件路径列表"""
    written: list[Path] = []
    for fmt in formats:
        formatter_cls = _formatters.get(fmt)
        if formatter_cls is None:
            logger.warning("未知报告格式: %s，已跳过", fmt)
            continue
        formatter = formatter_cls()
        path = Path(out_dir) / formatter.filename()
        atomic_write(path, formatter.format(report))
        written.append(path)
    logger.info("诊断报告已生成: %s", ", ".join(p.name for p in written))
    return written


# =========================================================================
# 评估输出
# =========================================================================

RESULT_COLUMNS = ("metric", "stratum", "point", "ci_low", "ci_high", "n", "seed")


def results_csv(rows: list[dict[str, Any]]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def write_eval_outputs(rows: list[dict[str, Any]], summary: dict[str, Any], out_dir: str | Path) -> list[Path]:
    """写出结果表 results.csv 与汇总 summary.json"""
    out = Path(out_dir)
    table, summary_path = out / "results.csv", out / "summary.json"
    atomic_write(table, results_csv(rows))
    atomic_write(summary_path, dump_json(summary))
    return [table, summary_path]
