"""Loss and accuracy curves from run logs and reports.

Every plot is written together with the tidy CSV that was plotted, so the
figure can be regenerated or inspected without the original run.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import FaceGanError  # noqa: E402
from .training import RUNLOG_HEADER  # noqa: E402

LOSS_COLUMNS = ("step", "gen_loss", "disc_loss")

# header -> (kind, x column, y columns)
KNOWN_HEADERS = {
    RUNLOG_HEADER: ("loss", "step", ("gen_loss", "disc_loss")),
    ("epoch", "accuracy"): ("accuracy", "epoch", ("accuracy",)),
    ("threshold", "accuracy"): ("verification", "threshold", ("accuracy",)),
}


class MalformedCSV(FaceGanError, ValueError):
    def __init__(self, path: Path, row: int, reason: str):
        super().__init__(f"{path}: row {row}: {reason}")
        self.path, self.row = path, row


@dataclass
class PlotOutput:
    kind: str
    image: Path
    table: Path


def read_numeric_csv(path: Path | str) -> tuple[str, str, tuple[str, ...], dict[str, list[float]]]:
    """Parse a CSV with a known header; row numbers in errors count the header as row 1."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MalformedCSV(path, 1, "file is empty")
    header = tuple(c.strip() for c in rows[0])
    if header not in KNOWN_HEADERS:
        raise MalformedCSV(path, 1, f"unrecognized header {','.join(header)}")
    kind, xcol, ycols = KNOWN_HEADERS[header]
    if len(rows) == 1:
        raise MalformedCSV(path, 2, "no data rows after the header")
    wanted = (xcol, *ycols)
    idx = [header.index(c) for c in wanted]
    data: dict[str, list[float]] = {c: [] for c in wanted}
    for rowno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise MalformedCSV(path, rowno, f"expected {len(header)} fields, found {len(row)}")
        for c, i in zip(wanted, idx):
            try:
                v = float(row[i])
            except ValueError:
                raise MalformedCSV(path, rowno, f"{c}={row[i]!r} is not a number") from None
            if not math.isfinite(v):
                raise MalformedCSV(path, rowno, f"{c}={row[i]!r} is not finite")
            data[c].append(v)
    return kind, xcol, ycols, data


def plot_csv(path: Path | str, out_dir: Path | str) -> PlotOutput:
    """Plot a RunLog (losses vs step) or an accuracy table and emit the tidy CSV."""
    path = Path(path)
    kind, xcol, ycols, data = read_numeric_csv(path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = {"loss": "loss_curve", "accuracy": "accuracy_curve", "verification": "verification_curve"}[kind]

    table = out / f"{stem}.csv"
    with table.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([xcol, *ycols])
        for vals in zip(*(data[c] for c in (xcol, *ycols))):
            w.writerow([int(vals[0]) if kind != "verification" else repr(vals[0]), *map(repr, vals[1:])])

    fig, ax = plt.subplots(figsize=(6, 4))
    for c in ycols:
        ax.plot(data[xcol], data[c], label=c)
    ax.set_xlabel({"loss": "step", "accuracy": "epoch", "verification": "distance threshold"}[kind])
    ax.set_ylabel("loss" if kind == "loss" else "accuracy")
    if len(ycols) > 1:
        ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    image = out / f"{stem}.png"
    fig.savefig(image, dpi=100)
    plt.close(fig)
    return PlotOutput(kind, image, table)
