"""CSV and gnuplot-data output for metrics series and throughput sweeps."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .metrics import COLUMNS, MetricsSeries

THROUGHPUT_COLUMNS = ("job_length_s", "ideal_rate", "achieved_rate")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def emit_report(
    series: MetricsSeries,
    path,
    fmt: str = "csv",
    ideal_rate: Optional[float] = None,
) -> Path:
    """Write ``series`` to ``path``.

    ``csv`` has exactly the MetricsSeries columns.  ``gnuplot`` is
    whitespace-separated with a ``#`` header and, when ``ideal_rate`` (jobs
    per second) is given, two reference columns: the ideal rate and the
    ideal completions per interval.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(COLUMNS)
            for row in series.rows:
                w.writerow([_cell(v) for v in row.values()])
    elif fmt == "gnuplot":
        cols = list(COLUMNS)
        if ideal_rate is not None:
            cols += ["ideal_rate", "ideal_turnover"]
        with open(path, "w") as f:
            f.write("# " + " ".join(cols) + "\n")
            for row in series.rows:
                vals = [_cell(v) or "?" for v in row.values()]
                if ideal_rate is not None:
                    vals += [_cell(ideal_rate), _cell(ideal_rate * series.interval_s)]
                f.write(" ".join(vals) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def write_table(path, columns: Sequence[str], rows: Iterable[Sequence], fmt: str = "csv") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        if fmt == "csv":
            w = csv.writer(f)
            w.writerow(columns)
            for r in rows:
                w.writerow([_cell(v) for v in r])
        elif fmt == "gnuplot":
            f.write("# " + " ".join(columns) + "\n")
            for r in rows:
                f.write(" ".join(_cell(v) or "?" for v in r) + "\n")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    return path


def write_throughput_table(path, points: Iterable[tuple[float, float, float]], fmt: str = "csv") -> Path:
    """``(job_length_s, ideal_rate, achieved_rate)`` rows, one per job length."""
    return write_table(path, THROUGHPUT_COLUMNS, points, fmt)
