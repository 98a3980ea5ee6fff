"""Reading and validating the result CSVs.

The schemas are the simulation harness's external contract; any column
drift fails loudly with the offending names.
"""

from __future__ import annotations

import csv
from pathlib import Path

RESULTS_COLUMNS = [
    "scenario_id", "mechanism", "shift_model", "theta", "method", "n_reps",
    "n_failed", "bias", "bias_mcse", "sd", "mean_se", "power", "power_mcse",
    "type1", "type1_mcse", "coverage", "coverage_mcse", "rmse",
    "collapse_level_counts",
]
REPLICATES_COLUMNS = [
    "scenario_id", "replicate", "method", "estimate", "se", "df", "ci_lo",
    "ci_hi", "p_zero", "p_margin", "collapse_level", "seconds",
]

_RESULT_FLOATS = ("theta", "bias", "bias_mcse", "sd", "mean_se", "power",
                  "power_mcse", "type1", "type1_mcse", "coverage",
                  "coverage_mcse", "rmse")
_REPLICATE_FLOATS = ("estimate", "se", "df", "ci_lo", "ci_hi", "p_zero",
                     "p_margin", "seconds")


class SchemaError(ValueError):
    """A CSV does not match the harness contract."""


def _read(path, expected_columns):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in expected_columns if c not in header]
        extra = [c for c in header if c not in expected_columns]
        if missing or extra:
            raise SchemaError(
                f"{path.name}: missing columns {missing or 'none'}, "
                f"unexpected columns {extra or 'none'}"
            )
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path.name}: no data rows")
    return rows


def _floatify(rows, float_cols, int_cols):
    out = []
    for raw in rows:
        row = dict(raw)
        for c in float_cols:
            row[c] = float(raw[c]) if raw[c] not in ("", None) else None
        for c in int_cols:
            row[c] = int(raw[c]) if raw[c] not in ("", None) else None
        out.append(row)
    return out


def read_results(path):
    rows = _read(path, RESULTS_COLUMNS)
    return _floatify(rows, _RESULT_FLOATS, ("n_reps", "n_failed"))


def read_replicates(path):
    rows = _read(path, REPLICATES_COLUMNS)
    return _floatify(rows, _REPLICATE_FLOATS, ("replicate", "collapse_level"))


def scenario_number(scenario_id: str) -> int:
    """Missingness scenario index parsed from ids like 'dar_instant_s3'."""
    for part in scenario_id.split("_"):
        if part.startswith("s") and part[1:].isdigit():
            return int(part[1:])
    raise SchemaError(f"cannot parse scenario number from {scenario_id!r}")
