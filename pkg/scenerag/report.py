import json
from typing import Any, Dict, List, Optional, Sequence

from .evaluation import ATTRIBUTES, MetricsReport
from .utils import logger

TABLE_COLUMNS = ["Dataset", "Model", "Category", "Quantity", "Location", "Relationship"]


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"


class ReportWriter:
    """
    Renders a MetricsReport as JSON, aligned text tables or Markdown.

    The text and Markdown layouts hold three tables: recall per attribute,
    F1 per attribute and the overall score.
    """

    def __init__(self, dataset: str = "dataset", model: str = "model"):
        """
        Initialize the report writer.

        Args:
            dataset: Dataset name printed in every table row
            model: Model (backend) name printed in every table row
        """
        self.dataset = dataset
        self.model = model

    def report_document(self, report: MetricsReport) -> Dict[str, Any]:
        """Machine-readable report: labels plus the per-image rows and aggregates."""
        document = {"dataset": self.dataset, "model": self.model}
        document.update(report.to_dict())
        return document

    def export_report(self, report: MetricsReport, format: str = "json") -> str:
        """
        Export a report in the specified format.

        Args:
            report: Aggregated metrics
            format: Output format ('json', 'text', 'markdown')

        Returns:
            String representation of the report
        """
        if format.lower() == "json":
            return self._export_json(report)
        elif format.lower() == "text":
            return self._export_text(report)
        elif format.lower() == "markdown":
            return self._export_markdown(report)
        else:
            logger.warning(f"Unsupported format: {format}, defaulting to JSON")
            return self._export_json(report)

    def _export_json(self, report: MetricsReport) -> str:
        """Export the report as JSON with sorted keys."""
        return json.dumps(self.report_document(report), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def _metric_row(self, report: MetricsReport, metric: str) -> List[str]:
        row = [self.dataset, self.model]
        for attribute in ATTRIBUTES:
            mean = report.means.get(attribute)
            row.append(_fmt(mean[metric] if mean else None))
        return row

    def _tables(self, report: MetricsReport) -> List[Dict[str, Any]]:
        return [
            {"title": "Recall", "header": TABLE_COLUMNS, "rows": [self._metric_row(report, "recall")]},
            {"title": "F1", "header": TABLE_COLUMNS, "rows": [self._metric_row(report, "f1")]},
            {
                "title": "Overall score",
                "header": ["Dataset", "Model", "Overall score"],
                "rows": [[self.dataset, self.model, _fmt(report.overall_score)]],
            },
        ]

    def _footer(self, report: MetricsReport) -> List[str]:
        return [
            f"Template version: {report.template_version}",
            f"Images: {report.image_count}, parse failures: {report.parse_failures}",
            f"Pooling: {report.pooling}, averaging: {report.averaging}, threshold: {report.threshold}",
        ]

    @staticmethod
    def _align(header: Sequence[str], rows: Sequence[Sequence[str]]) -> List[str]:
        widths = [max(len(str(cell)) for cell in column) for column in zip(header, *rows)]
        lines = ["  ".join(str(cell).ljust(width) for cell, width in zip(header, widths)).rstrip()]
        lines.append("  ".join("-" * width for width in widths))
        for row in rows:
            lines.append("  ".join(str(cell).ljust(width) for cell, width in zip(row, widths)).rstrip())
        return lines

    def _export_text(self, report: MetricsReport) -> str:
        """Export the report as aligned plain-text tables."""
        lines: List[str] = []
        for table in self._tables(report):
            lines.append(table["title"])
            lines.extend(self._align(table["header"], table["rows"]))
            lines.append("")
        lines.extend(self._footer(report))
        return "\n".join(lines) + "\n"

    def _export_markdown(self, report: MetricsReport) -> str:
        """Export the report as Markdown."""
        md_lines = ["# Evaluation Report", ""]
        for table in self._tables(report):
            md_lines.append(f"## {table['title']}")
            md_lines.append("| " + " | ".join(table["header"]) + " |")
            md_lines.append("|" + "|".join("---" for _ in table["header"]) + "|")
            for row in table["rows"]:
                md_lines.append("| " + " | ".join(row) + " |")
            md_lines.append("")

        md_lines.append("## Per-image recall")
        md_lines.append("| Image | Parsed | " + " | ".join(a.capitalize() for a in ATTRIBUTES) + " |")
        md_lines.append("|" + "|".join("---" for _ in range(len(ATTRIBUTES) + 2)) + "|")
        for item in report.per_image:
            cells = [
                _fmt(item.scores[a].recall) if item.scores[a].defined else "-"
                for a in ATTRIBUTES
            ]
            md_lines.append(f"| {item.image_id} | {'yes' if item.parse_ok else 'no'} | " + " | ".join(cells) + " |")
        md_lines.append("")
        md_lines.extend(f"- {line}" for line in self._footer(report))
        return "\n".join(md_lines) + "\n"
