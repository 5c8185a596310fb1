"""Staggered-adoption panel econometrics for parish-level railway studies.

Two-way fixed effects and group-time difference-in-differences estimators,
cluster / spatial-HAC / multiplier-bootstrap inference, census micro-record
aggregation, market-access construction and a synthetic-data oracle harness.
"""

from railpanel.errors import RailpanelError
from railpanel.panel import (
    NEVER,
    PanelDataset,
    TreatmentSchedule,
    ValidationReport,
    complete_cases,
    event_time,
    read_panel_csv,
    validate_panel,
    write_panel_csv,
)

__version__ = "0.1.0"

__all__ = [
    "NEVER",
    "PanelDataset",
    "RailpanelError",
    "TreatmentSchedule",
    "ValidationReport",
    "complete_cases",
    "event_time",
    "read_panel_csv",
    "validate_panel",
    "write_panel_csv",
]
