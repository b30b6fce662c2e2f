"""Report files: stable-order JSON, RFC-4180 CSV tables, run comparison.

report.json is byte-stable for a fixed config + seed at any worker count;
everything execution-dependent (elapsed time, timestamp, worker count,
output directory) lives under the single "runtime" key, which is exactly
what ``reports_match`` ignores.
"""

import csv
import json
import math
from pathlib import Path


def _clean(value):
    """Replace NaN/Inf floats with None so strict JSON emission never fails.

    Flagged statistics (for example under-filled covariance bins) are NaN in
    memory; in the report they become null.
    """
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, bool):
        return value
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        return _clean(value.item())  # numpy scalars
    return value


def report_bytes(report: dict) -> bytes:
    text = json.dumps(_clean(report), indent=2, sort_keys=True, allow_nan=False)
    return (text + "\n").encode("utf-8")


def write_report(outdir, report: dict) -> Path:
    path = Path(outdir) / "report.json"
    path.write_bytes(report_bytes(report))
    return path


def load_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def strip_runtime(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "runtime"}


def reports_match(a: dict, b: dict) -> bool:
    """Equality of two reports modulo the runtime block, via canonical JSON."""
    return report_bytes(strip_runtime(a)) == report_bytes(strip_runtime(b))


def write_table(outdir, name: str, header, rows) -> Path:
    """One CSV table under tables/ with a header row and RFC-4180 quoting."""
    tables = Path(outdir) / "tables"
    tables.mkdir(parents=True, exist_ok=True)
    path = tables / f"{name}.csv"
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def write_path_table(outdir, name: str, header, rows) -> Path:
    """Like write_table but under paths/ (per-trajectory dumps)."""
    paths = Path(outdir) / "paths"
    paths.mkdir(parents=True, exist_ok=True)
    path = paths / f"{name}.csv"
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def _cell(value):
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        value = value.item()
    if isinstance(value, float):
        return repr(value)
    return value
