"""Report serialization: TSV with a commented config echo, or JSON."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Any

from .scenario import ROW_COLUMNS, Report, Row

FORMATS = ("tsv", "json")
_FLOAT_COLUMNS = {"mean_ns", "median_ns", "p99_ns", "ops_per_sec", "bytes_per_sec", "rtts"}
_INT_COLUMNS = {"size", "iterations", "redo", "pins", "unpins"}


def _fmt(name: str, value: Any) -> str:
    if name in _FLOAT_COLUMNS:
        return f"{value:.3f}"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def to_tsv(report: Report) -> str:
    buf = io.StringIO()
    buf.write(f"# seed\t{report.seed}\n")
    buf.write(f"# scenario\t{json.dumps(report.scenario, sort_keys=True)}\n")
    buf.write(f"# latency_model\t{json.dumps(report.latency_model, sort_keys=True)}\n")
    for v in report.violations:
        buf.write(f"# violation\t{v}\n")
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(ROW_COLUMNS)
    for row in report.rows:
        w.writerow([_fmt(c, getattr(row, c)) for c in ROW_COLUMNS])
    return buf.getvalue()


def _row_from(values: dict[str, str]) -> Row:
    kw: dict[str, Any] = {}
    for c in ROW_COLUMNS:
        v = values[c]
        if c in _FLOAT_COLUMNS:
            kw[c] = float(v)
        elif c in _INT_COLUMNS:
            kw[c] = int(v)
        elif c == "oracle_match":
            kw[c] = v == "true"
        else:
            kw[c] = v
    return Row(**kw)


def parse_tsv(text: str) -> Report:
    """Inverse of :func:`to_tsv` (floats come back at the printed precision)."""
    meta: dict[str, Any] = {"violations": []}
    body = []
    for line in text.splitlines():
        if line.startswith("# "):
            key, _, val = line[2:].partition("\t")
            if key == "violation":
                meta["violations"].append(val)
            elif key == "seed":
                meta["seed"] = int(val)
            else:
                meta[key] = json.loads(val)
        elif line:
            body.append(line)
    rows = [_row_from(r) for r in csv.DictReader(body, delimiter="\t")]
    return Report(meta["scenario"], meta["seed"], meta["latency_model"], rows, meta["violations"])


def to_json(report: Report) -> str:
    doc = {
        "seed": report.seed,
        "scenario": report.scenario,
        "latency_model": report.latency_model,
        "columns": ROW_COLUMNS,
        "rows": [{c: getattr(r, c) for c in ROW_COLUMNS} for r in report.rows],
        "violations": report.violations,
        "ok": report.ok,
    }
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def render(report: Report, fmt: str) -> str:
    if fmt == "tsv":
        return to_tsv(report)
    if fmt == "json":
        return to_json(report)
    raise ValueError(f"unknown format {fmt!r}")


def emit_report(report: Report, fmt: str, path: str | Path | None = None) -> str:
    """Render ``report``; write it to ``path`` when given. Returns the text."""
    text = render(report, fmt)
    if path is not None:
        Path(path).write_text(text)
    return text
