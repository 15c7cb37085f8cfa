"""Normalized grouped bars from a comparison CSV.

The input is the flat CSV the simulator's compare command writes: one row
per (run spec, cooling state) with absolute metric columns. Bars show each
row group's metric divided by the baseline group's value for the matching
cooling state, so the baseline bars sit at exactly 1.0.

Rendering is a pure function of the CSV: fixed style, fixed geometry, no
timestamps or tool tags in the image, atomic file replacement.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass


class PlotError(Exception):
    """Bad input: unreadable CSV, unknown column, unknown baseline."""


@dataclass(frozen=True)
class PlotSpec:
    """One chart: which CSV, which metric, normalized to which row group."""

    csv_path: str
    metric: str
    baseline: str
    out_path: str
    title: str | None = None
    group_by: str | None = None  # default: config_id, else policy


def load_rows(path: str) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if not reader.fieldnames:
                raise PlotError(f"{path}: no header row")
            rows = []
            for row in reader:
                if None in row or any(v is None for v in row.values()):
                    raise PlotError(f"{path}: ragged row {reader.line_num}")
                rows.append(row)
    except OSError as exc:
        raise PlotError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise PlotError(f"{path}: no data rows")
    return rows


def _pick_group_column(rows: list[dict], baseline: str,
                       group_by: str | None) -> str:
    candidates = [group_by] if group_by else ["config_id", "policy"]
    for col in candidates:
        if col not in rows[0]:
            if group_by:
                raise PlotError(f"no column named {col!r} to group by")
            continue
        if any(r[col] == baseline for r in rows):
            return col
    raise PlotError(
        f"baseline {baseline!r} does not name a row group "
        f"(searched {', '.join(c for c in candidates if c in rows[0])})")


def _metric_value(row: dict, metric: str, path_hint: str) -> float:
    try:
        return float(row[metric])
    except ValueError as exc:
        raise PlotError(
            f"{path_hint}: column {metric!r} holds non-numeric "
            f"value {row[metric]!r}") from exc


def normalize(rows: list[dict], metric: str, baseline: str,
              group_by: str | None = None):
    """Per-group metric ratios vs the baseline group.

    Returns (groups, states, values) where groups keep CSV order, states
    are the distinct cooling labels (one empty label when the column is
    absent) and values maps (group, state) to the normalized height.
    """
    if metric not in rows[0]:
        raise PlotError(f"no column named {metric!r} in the CSV")
    key = _pick_group_column(rows, baseline, group_by)

    groups: list[str] = []
    for r in rows:
        if r[key] not in groups:
            groups.append(r[key])
    has_cooling = "cooling" in rows[0]
    states = sorted({r["cooling"] for r in rows}) if has_cooling else [""]

    raw: dict[tuple[str, str], float] = {}
    for r in rows:
        state = r["cooling"] if has_cooling else ""
        raw[(r[key], state)] = _metric_value(r, metric, r[key])

    values: dict[tuple[str, str], float] = {}
    for (group, state), v in raw.items():
        base = raw.get((baseline, state))
        if base is None:
            raise PlotError(
                f"baseline {baseline!r} has no row for cooling={state!r}")
        if base == 0.0:
            raise PlotError(
                f"baseline {baseline!r} metric {metric!r} is zero")
        values[(group, state)] = v / base
    return groups, states, values


def render(spec: PlotSpec) -> dict[tuple[str, str], float]:
    """Draw the chart and atomically write the image.

    Returns the normalized values so callers and tests can check heights
    without decoding pixels. Nothing is written when any step fails.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = load_rows(spec.csv_path)
    groups, states, values = normalize(rows, spec.metric, spec.baseline,
                                       spec.group_by)

    fig, ax = plt.subplots(figsize=(6.4, 3.4))
    width = 0.8 / len(states)
    for i, state in enumerate(states):
        xs, ys = [], []
        for j, group in enumerate(groups):
            if (group, state) in values:
                xs.append(j + i * width)
                ys.append(values[(group, state)])
        label = {"True": "cooled", "False": "uncooled"}.get(state, state)
        ax.bar(xs, ys, width=width * 0.9, label=label or None)
        for x, y in zip(xs, ys):
            ax.text(x, y, f"{y:.2f}", ha="center", va="bottom", fontsize=7)
    ax.set_xticks([j + (len(states) - 1) * width / 2
                   for j in range(len(groups))])
    ax.set_xticklabels(groups, fontsize=8)
    ax.set_ylabel(f"{spec.metric} / {spec.baseline}")
    ax.axhline(1.0, color="gray", lw=0.8, ls="--")
    if spec.title:
        ax.set_title(spec.title, fontsize=10)
    if len(states) > 1:
        ax.legend(fontsize=7)
    fig.tight_layout()

    buf = io.BytesIO()
    # a nulled Software entry keeps library version strings out of the file
    fig.savefig(buf, format="png", dpi=120, metadata={"Software": None})
    plt.close(fig)

    out_dir = os.path.dirname(os.path.abspath(spec.out_path))
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, spec.out_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return values
