from lib.great_tables.mc_table import (
    get_mc_tab_options,
    mc_report_table,
    write_mc_report_html,
)

__all__ = [
    "get_mc_tab_options",
    "mc_report_table",
    "write_mc_report_html",
]
