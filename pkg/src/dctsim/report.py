"""Turn per-run summary files into one comparison table.

A run directory holds a ``summary.txt`` of ``key = value`` lines.  The
report collects one row per run, keyed on the masking fraction, and
refuses to mix runs that disagree on the data seed, since loss numbers
from different datasets do not belong in the same table.
"""

import csv
import io
import math

from .errors import ConfigError

REQUIRED = ("eta", "final_train_loss", "final_test_loss",
            "sent_bytes", "simulated_time")
# present in every row or omitted from the table entirely
OPTIONAL = ("dp_lifespan", "sorted_elements", "compress_seconds", "byte_ratio")

_HEADERS = {
    "eta": "eta",
    "final_train_loss": "train_loss",
    "final_test_loss": "test_loss",
    "sent_bytes": "sent_bytes",
    "simulated_time": "simulated_time",
    "dp_lifespan": "lifespan",
    "sorted_elements": "sorted_elements",
    "compress_seconds": "compress_seconds",
    "byte_ratio": "byte_ratio",
}


def _parse_value(text):
    if text == "True":
        return True
    if text == "False":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_summary(path):
    """Parse one summary file back into a dict."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{i}: expected 'key = value', got {line!r}")
        out[key.strip()] = _parse_value(value.strip())
    return out


def aggregate(summaries, sources=None):
    """Check and order run summaries; returns one row dict per run.

    Every summary must carry the required keys and all runs must share a
    seed.  Optional columns appear only when every run has them.
    """
    summaries = list(summaries)
    if sources is None:
        sources = [f"run {i}" for i in range(len(summaries))]
    if not summaries:
        raise ConfigError("report: no run summaries given")
    for src, summ in zip(sources, summaries):
        missing = [k for k in REQUIRED if k not in summ]
        if missing:
            raise ConfigError(f"{src}: summary missing required keys {missing}")
    seeds = {summ.get("seed") for summ in summaries}
    if len(seeds) > 1:
        raise ConfigError(
            f"report: seed mismatch across runs {sorted(seeds, key=repr)}; "
            "rerun the sweep under one seed")
    keep = list(REQUIRED) + [k for k in OPTIONAL
                             if all(k in summ for summ in summaries)]
    rows = [{k: summ[k] for k in keep} for summ in summaries]
    rows.sort(key=lambda r: (r["eta"], r.get("dp_lifespan", 0)))
    return rows


def _cell(value):
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, float):
        if math.isinf(value) or math.isnan(value):
            return str(value)
        return f"{value:.6g}"
    return str(value)


def render_table(rows):
    """Aligned text table, one line per run."""
    keys = list(rows[0])
    header = [_HEADERS[k] for k in keys]
    grid = [header] + [[_cell(row[k]) for k in keys] for row in rows]
    widths = [max(len(line[i]) for line in grid) for i in range(len(keys))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(line, widths))
             for line in grid]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def to_csv(rows):
    """Plot-ready CSV with the same columns as the text table."""
    keys = list(rows[0])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_HEADERS[k] for k in keys)
    for row in rows:
        writer.writerow("%.17g" % row[k] if isinstance(row[k], float)
                        else row[k] for k in keys)
    return buf.getvalue()


def report_runs(paths):
    """Read each run directory's summary and aggregate them."""
    summaries = [read_summary(f"{p}/summary.txt") for p in paths]
    return aggregate(summaries, sources=list(paths))
