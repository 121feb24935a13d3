"""CSV serialization of training metrics.

Schema: optional '#'-prefixed metadata comment lines, then the header
step,epoch,stage,metric,value with one row per recorded scalar. Values are
written with 9 significant digits, UTF-8, newline-terminated.
"""

from __future__ import annotations

HEADER = "step,epoch,stage,metric,value"


def format_value(v: float) -> str:
    return f"{v:.9g}"


def write_metrics(report, path) -> None:
    lines = [f"# {k}: {v}" for k, v in report.meta.items()]
    lines.append(HEADER)
    for step, epoch, stage, metric, value in report.rows:
        lines.append(f"{step},{epoch},{stage},{metric},{format_value(value)}")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as e:
        raise OSError(f"cannot write metrics to {path}: {e}") from e


def read_metrics(path):
    """Parse a metrics CSV back into (meta, rows)."""
    meta = {}
    rows = []
    with open(path, encoding="utf-8") as f:
        saw_header = False
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    k, v = body.split(":", 1)
                    meta[k.strip()] = v.strip()
                continue
            if not saw_header:
                if line != HEADER:
                    raise ValueError(f"{path}: unexpected header '{line}'")
                saw_header = True
                continue
            step, epoch, stage, metric, value = line.split(",")
            rows.append((int(step), int(epoch), int(stage), metric,
                         float(value)))
    return meta, rows
