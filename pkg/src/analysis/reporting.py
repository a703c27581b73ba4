"""
Result tables: CSV files headed by the config they came from, optional SVG plots,
and aligned text for the terminal.
"""

import csv
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RESULTS_FORMAT_VERSION = 1


def write_table(
    path: Path,
    columns: Sequence[str],
    rows: Sequence[Sequence[Any]],
    config: Optional[Mapping[str, Any]] = None,
) -> Path:
    """
    Write rows as CSV, preceded by ``# key=value`` lines describing the run.

    Args:
        path: Output file.
        columns: Header names.
        rows: One sequence per row, in column order.
        config: Flat settings recorded above the header.

    Returns:
        The written path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# format_version={RESULTS_FORMAT_VERSION}\n")
        for key, value in (config or {}).items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)
    return path


def read_table(path: Path):
    """(comments, columns, rows) of a file written by write_table; values stay strings."""
    comments: Dict[str, str] = {}
    lines = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            comments[key] = value
        else:
            lines.append(line)
    reader = csv.reader(lines)
    columns = next(reader)
    return comments, columns, [row for row in reader]


def plot_lines(
    path: Path,
    x: Sequence[float],
    series: Mapping[str, Sequence[float]],
    xlabel: str,
    ylabel: str,
    title: str = "",
) -> Path:
    """Single-figure line plot saved as SVG."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, y in series.items():
        ax.plot(list(x), list(y), label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def format_table(columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    """Aligned text table."""
    cells = [[_cell(v) for v in row] for row in rows]
    widths = [max([len(c)] + [len(r[i]) for r in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(f"{c:>{w}}" for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(f"{v:>{w}}" for v, w in zip(row, widths)) for row in cells)
    return "\n".join(lines)


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)
