"""Run artifact writers: metrics trace, op log, decision log, summary.

Logs are written either as delimited text (CSV with a schema comment line) or
as a structured JSON tree; the summary is always JSON.  Readers reject unknown
major schema versions.  Every number in the summary is recomputable from the
raw trace rows.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

from .sim import RunResult, SCHEMA_VERSION

OP_FIELDS = [
    "tick_ms", "kind", "layer", "src_device", "dst_device",
    "time_s", "transient_mb", "phase", "detail",
]

DECISION_FIELDS = [
    "tick_ms", "trigger", "instance", "n_ops", "sp_before", "sp_after",
    "bs_before", "bs_after", "resolved", "cost_s",
]


class SchemaVersionError(ValueError):
    pass


def check_schema_version(version: str) -> None:
    major = str(version).split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise SchemaVersionError(f"unsupported schema major version {version!r}")


def _csv_text(rows: Sequence[dict], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema_version={SCHEMA_VERSION}\n")
    writer = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k)) for k in fields})
    return buf.getvalue()


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return value


def _json_text(rows: Sequence[dict]) -> str:
    return json.dumps({"schema_version": SCHEMA_VERSION, "rows": list(rows)}, indent=1)


def read_rows(path: str | Path) -> list[dict]:
    """Load a trace/op/decision log written by `write_result`, either format."""
    p = Path(path)
    text = p.read_text()
    if p.suffix == ".json":
        doc = json.loads(text)
        check_schema_version(doc.get("schema_version", "0"))
        return doc["rows"]
    lines = text.splitlines()
    if lines and lines[0].startswith("# schema_version="):
        check_schema_version(lines[0].split("=", 1)[1])
        lines = lines[1:]
    return list(csv.DictReader(lines))


def write_result(result: RunResult, out_dir: str | Path, fmt: str = "csv") -> list[Path]:
    """Write trace, op log, decision log (in `fmt`) plus summary.json."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown output format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace_rows = list(result.trace_rows)
    trace_fields = list(trace_rows[0].keys()) if trace_rows else ["tick_ms"]
    op_rows = [asdict(r) for r in result.op_rows]
    decision_rows = list(result.decision_rows)
    written: list[Path] = []
    tables = [
        ("trace", trace_rows, trace_fields),
        ("ops", op_rows, OP_FIELDS),
        ("decisions", decision_rows, DECISION_FIELDS),
    ]
    for name, rows, fields in tables:
        path = out / f"{name}.{fmt}"
        if fmt == "csv":
            path.write_text(_csv_text(rows, fields))
        else:
            path.write_text(_json_text(rows))
        written.append(path)
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(result.summary, indent=1, sort_keys=True))
    written.append(summary_path)
    return written


def read_summary(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    check_schema_version(doc.get("schema_version", "0"))
    return doc
