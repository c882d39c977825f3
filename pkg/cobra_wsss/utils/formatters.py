"""
Formatting utilities for console output.
"""

from typing import Dict, List, Optional

from rich.table import Table

from ..core.models import IouResult, LossReport


class Formatters:
    """Builds rich tables and short strings for the CLI."""

    @staticmethod
    def format_percentage(value: Optional[float], decimal_places: int = 2) -> str:
        """
        Format a ratio as a percentage.

        Args:
            value: ratio in [0, 1], or None when undefined
            decimal_places: number of decimal places

        Returns:
            e.g. "58.33%", or "n/a"
        """
        if value is None:
            return "n/a"
        return f"{value * 100:.{decimal_places}f}%"

    @staticmethod
    def format_loss_report(report: LossReport) -> str:
        return (
            f"cls={report.cls:.4f} cam={report.cam:.4f} cap={report.cap:.4f} "
            f"sap={report.sap:.4f} total={report.total:.4f}"
        )

    @staticmethod
    def iou_table(result: IouResult, title: str = "Per-class IoU") -> Table:
        table = Table(title=title)
        table.add_column("Class", style="cyan")
        table.add_column("IoU", justify="right")
        for name, value in zip(result.class_names, result.iou):
            table.add_row(name, Formatters.format_percentage(value))
        table.add_section()
        table.add_row("[bold]mIoU[/bold]", f"[bold]{Formatters.format_percentage(result.miou)}[/bold]")
        table.caption = f"{result.evaluated_pixels} pixels evaluated, {result.ignored_pixels} ignored"
        return table

    @staticmethod
    def gradient_table(errors: Dict[str, float], tolerance: float) -> Table:
        """Max relative error per loss, flagged against ``tolerance``."""
        table = Table(title="Gradient check")
        table.add_column("Loss", style="cyan")
        table.add_column("Max rel. error", justify="right")
        table.add_column("Status")
        for name, error in errors.items():
            status = "[green]ok[/green]" if error <= tolerance else "[red]FAIL[/red]"
            table.add_row(name, f"{error:.3e}", status)
        return table

    @staticmethod
    def history_table(history: List[LossReport]) -> Table:
        table = Table(title="Training losses (epoch means)")
        table.add_column("Epoch", justify="right")
        for column in ("cls", "cam", "cap", "sap", "total"):
            table.add_column(column, justify="right")
        for epoch, report in enumerate(history):
            table.add_row(
                str(epoch),
                *(f"{getattr(report, column):.4f}" for column in ("cls", "cam", "cap", "sap", "total")),
            )
        return table

    @staticmethod
    def ranking_table(values: Dict[str, float], title: str, key: str) -> Table:
        """Two-column table of medians in the given order."""
        table = Table(title=title)
        table.add_column(key, style="cyan")
        table.add_column("Seed mIoU (median)", justify="right")
        for name, value in values.items():
            table.add_row(name, Formatters.format_percentage(value))
        return table

    @staticmethod
    def diagnostics_table(diagnostics: Dict[str, Dict[str, float]]) -> Table:
        table = Table(title="Branch diagnostics (median)")
        table.add_column("Row", style="cyan")
        table.add_column("Class precision", justify="right")
        table.add_column("Semantic sensitivity", justify="right")
        for name, values in diagnostics.items():
            table.add_row(
                name,
                Formatters.format_percentage(values["class_precision"]),
                Formatters.format_percentage(values["semantic_sensitivity"]),
            )
        return table
