"""Great Tables rendering of Monte Carlo reports.

One row per method, one column spanner per simulation design ``(N, n)``, with
BIAS / MSE / SE / CR beneath each spanner:

- **Title**: bold, 15px, left-aligned; subtitle carries p, the true QTE and
  the replication count.
- **Rules**: thick rule above the column labels, medium rule below them,
  light gray rules between body rows, no vertical lines, no striping.
- **Numbers**: four decimals throughout.

Usage::

    from lib.great_tables import mc_report_table

    html = mc_report_table(report).as_raw_html()
"""

from __future__ import annotations

from collections.abc import Iterable
from pathlib import Path
from typing import TYPE_CHECKING, Any

import polars as pl
from great_tables import GT

if TYPE_CHECKING:
    from lib.fqte.sim import McReport

METRICS = ("BIAS", "MSE", "SE", "CR")

_COLOR_HEADER = "#333333"
_COLOR_DATA = "#4D4D4D"
_COLOR_RULE = "#000000"
_COLOR_RULE_LIGHT = "#D8D8D8"
_COLOR_BG = "#FFFFFF"
_LABEL_PX = "12px"


def _typography_rules() -> list[str]:
    """CSS appended after GT's compiled rules; !important beats ``#table_id table {...}``."""
    return [
        ".gt_table .gt_heading .gt_title { font-weight: bold !important; font-size: 15px !important; "
        "color: #000000 !important; text-align: left !important; }",
        ".gt_table .gt_heading .gt_subtitle { font-size: 13px !important; "
        f"color: {_COLOR_HEADER} !important; text-align: left !important; padding-bottom: 20px !important; }}",
        ".gt_table .gt_column_spanner { font-weight: bold !important; "
        f"font-size: {_LABEL_PX} !important; color: {_COLOR_HEADER} !important; }}",
        f".gt_table .gt_col_heading {{ font-size: {_LABEL_PX} !important; color: {_COLOR_HEADER} !important; }}",
        ".gt_table .gt_stub { font-family: monospace !important; "
        f"font-size: 11px !important; color: {_COLOR_DATA} !important; }}",
        ".gt_table tbody tr.gt_striped > td, .gt_table tbody tr.gt_striped > th { "
        f"background-color: {_COLOR_BG} !important; }}",
    ]


def get_mc_tab_options(*, extra_table_additional_css: Iterable[str] | None = None, **overrides: Any) -> dict[str, Any]:
    """Keyword arguments for :meth:`great_tables.GT.tab_options`.

    ``extra_table_additional_css`` is appended after the built-in rules; any
    other keyword replaces the matching option.
    """
    css = _typography_rules()
    if extra_table_additional_css is not None:
        css.extend(extra_table_additional_css)
    options: dict[str, Any] = {
        "table_font_size": "11px",
        "table_font_color": _COLOR_DATA,
        "table_background_color": _COLOR_BG,
        "table_border_top_style": "none",
        "table_border_bottom_style": "none",
        "heading_align": "left",
        "heading_title_font_size": "15px",
        "heading_subtitle_font_size": "13px",
        "heading_border_bottom_style": "none",
        "column_labels_font_size": _LABEL_PX,
        "column_labels_vlines_style": "none",
        "column_labels_border_top_style": "solid",
        "column_labels_border_top_width": "3px",
        "column_labels_border_top_color": _COLOR_RULE,
        "column_labels_border_bottom_style": "solid",
        "column_labels_border_bottom_width": "2px",
        "column_labels_border_bottom_color": _COLOR_RULE,
        "table_body_hlines_style": "solid",
        "table_body_hlines_width": "1px",
        "table_body_hlines_color": _COLOR_RULE_LIGHT,
        "table_body_vlines_style": "none",
        "table_body_border_bottom_style": "none",
        "stub_border_style": "none",
        "row_striping_include_table_body": False,
        "table_additional_css": css,
    }
    options.update(overrides)
    return options


def _design_key(N: int, n: int) -> str:
    return f"{N}_{n}"


def wide_report(table: pl.DataFrame) -> tuple[pl.DataFrame, list[tuple[int, int]]]:
    """Pivot a long report (one row per design and method) to one row per method."""
    designs = table.select("N", "n").unique(maintain_order=True).rows()
    wide: pl.DataFrame | None = None
    for N, n in designs:
        key = _design_key(N, n)
        block = table.filter((pl.col("N") == N) & (pl.col("n") == n)).select(
            "Method", *[pl.col(m).alias(f"{key}_{m}") for m in METRICS]
        )
        wide = block if wide is None else wide.join(block, on="Method", how="full", coalesce=True,
                                                    maintain_order="left_right")
    if wide is None:
        wide = pl.DataFrame(schema={"Method": pl.String})
    return wide, designs


def mc_report_table(report: McReport, decimals: int = 4) -> GT:
    wide, designs = wide_report(report.table)
    gt = GT(wide, rowname_col="Method").tab_header(
        title="Monte Carlo performance",
        subtitle=f"p = {report.p}, true QTE = {report.truth:.4f}, {report.replications} replications",
    )
    for N, n in designs:
        key = _design_key(N, n)
        columns = [f"{key}_{m}" for m in METRICS]
        gt = gt.tab_spanner(label=f"(N, n) = ({N}, {n})", columns=columns)
        gt = gt.cols_label(**{f"{key}_{m}": m for m in METRICS})
        gt = gt.fmt_number(columns=columns, decimals=decimals)
    if report.failures:
        gt = gt.tab_source_note(f"{report.failures} replication(s) excluded after fit failures.")
    return gt.tab_options(**get_mc_tab_options())


def write_mc_report_html(report: McReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(mc_report_table(report).as_raw_html())
