"""CSV and JSON reports with atomic writes."""
from __future__ import annotations

import csv
import io
import json
import os
import platform
import tempfile
from importlib import resources
from pathlib import Path as FsPath

import numpy as np

from .suites import Check, SuiteResult

__all__ = [
    "CSV_COLUMNS",
    "REFINEMENT_COLUMNS",
    "report_csv",
    "refinement_csv",
    "parse_report_csv",
    "report_dict",
    "load_schema",
    "validate_report",
    "write_atomic",
    "emit",
]

CSV_COLUMNS = ("suite", "check", "paper_ref", "value", "tol", "pass")
REFINEMENT_COLUMNS = ("suite", "quantity", "N", "value")


def _version() -> str:
    from . import __version__

    return __version__


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def report_csv(result: SuiteResult) -> str:
    rows = [(c.suite, c.name, c.paper_ref, repr(c.value), c.tol_text, "true" if c.passed else "false")
            for c in result.checks]
    return _csv_text(CSV_COLUMNS, rows)


def refinement_csv(result: SuiteResult) -> str:
    rows = [(result.suite, r["quantity"], r["N"], repr(r["value"])) for r in result.refinement]
    return _csv_text(REFINEMENT_COLUMNS, rows)


def _parse_tol(text: str) -> tuple[float, float | None]:
    if ".." in text:
        lo, hi = text.split("..")
        return float(hi), float(lo)
    return float(text), None


def parse_report_csv(text: str) -> list[Check]:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != CSV_COLUMNS:
        raise ValueError(f"unexpected report columns {header}")
    out = []
    for suite, name, ref, value, tol, passed in reader:
        hi, lo = _parse_tol(tol)
        c = Check(suite, name, ref, float(value), hi, lo)
        if (passed == "true") != c.passed:
            raise ValueError(f"pass column disagrees with value for {name}")
        out.append(c)
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return repr(x)
    return x


def report_dict(result: SuiteResult, seeds=(), timing: bool = True) -> dict:
    env = {"seeds": list(seeds), "version": _version(), "python": platform.python_version(),
           "numpy": np.__version__}
    if timing:
        env["elapsed_seconds"] = round(result.elapsed, 6)
    return {
        "suite": result.suite,
        "passed": result.passed,
        "records": [
            {
                "suite": c.suite,
                "check": c.name,
                "paper_ref": c.paper_ref,
                "value": _jsonable(c.value),
                "tol": c.tol_text,
                "pass": c.passed,
            }
            for c in result.checks
        ],
        "refinement": [{"suite": result.suite, **r} for r in result.refinement],
        "notes": _jsonable(result.notes),
        "environment": env,
    }


def load_schema() -> dict:
    text = resources.files("hvolterra").joinpath("report_schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_report(data: dict) -> None:
    import jsonschema

    jsonschema.validate(data, load_schema())


def write_atomic(path, text: str) -> None:
    """Write through a temporary file in the target directory, then rename."""
    path = FsPath(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit(result: SuiteResult, out_dir, fmt: str = "csv", seeds=()) -> list[FsPath]:
    """Render every output first, then write them; returns the written paths."""
    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        files = {
            out / f"{result.suite}-report.csv": report_csv(result),
            out / f"{result.suite}-refinement.csv": refinement_csv(result),
        }
    elif fmt == "json":
        data = report_dict(result, seeds)
        validate_report(data)
        files = {out / f"{result.suite}-report.json": json.dumps(data, indent=2, sort_keys=True) + "\n"}
    else:
        raise ValueError(f"unknown format {fmt!r}")
    for path, text in files.items():
        write_atomic(path, text)
    return list(files)
