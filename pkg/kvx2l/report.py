"""CSV and gnuplot report emitters."""

import csv
import logging
from pathlib import Path
from typing import Sequence

from kvx2l.bench import RECORD_FIELDS, BenchRecord
from kvx2l.errors import CacheIOError
from kvx2l.niah import NiahMatrix

logger = logging.getLogger(__name__)


def _open(path: str):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "w", newline="", encoding="utf-8")
    except OSError as e:
        logger.error(f"Error opening {path}: {e}")
        raise CacheIOError(f"cannot write report {path}: {e}")


def write_bench_csv(records: Sequence[BenchRecord], path: str) -> Path:
    """One row per record; a header-only file when there are none."""
    with _open(path) as handle:
        writer = csv.DictWriter(handle, fieldnames=RECORD_FIELDS)
        writer.writeheader()
        for record in records:
            writer.writerow(record.to_row())
    logger.info(f"Wrote {len(records)} bench rows to {path}")
    return Path(path)


def write_niah_csv(matrix: NiahMatrix, path: str) -> Path:
    """Rows are needle depths (percent), columns are context lengths."""
    with _open(path) as handle:
        writer = csv.writer(handle)
        writer.writerow(["depth_pct"] + [str(n) for n in matrix.lengths])
        for di, depth in enumerate(matrix.depths):
            writer.writerow([f"{100 * depth:g}"] + [f"{a:.4f}" for a in matrix.accuracy[di]])
    logger.info(f"Wrote {matrix.label} accuracy matrix to {path}")
    return Path(path)


GNUPLOT_TEMPLATE = """# heatmap of NIAH accuracy: {title}
set datafile separator ","
set title "{title}"
set xlabel "context length (tokens)"
set ylabel "needle depth (%)"
set cbrange [0:1]
set palette defined (0 "red", 0.5 "yellow", 1 "green")
set terminal pngcairo size 800,500
set output "{png}"
plot "{csv}" matrix rowheaders columnheaders using 1:2:3 with image notitle
"""


def write_gnuplot_heatmap(csv_path: str, script_path: str, title: str) -> Path:
    """Plot script rendering a NIAH CSV as a heatmap."""
    png = str(Path(csv_path).with_suffix(".png"))
    with _open(script_path) as handle:
        handle.write(GNUPLOT_TEMPLATE.format(title=title, csv=csv_path, png=png))
    return Path(script_path)
