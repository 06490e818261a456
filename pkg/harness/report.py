import csv
import json
import logging
import os
from typing import Any, Dict, List, Sequence, Tuple

from harness.scenario import METRICS_COLUMNS, MetricsRow
from utils.trace import CHUNK_TRACE_COLUMNS, ChunkTrace

logger = logging.getLogger(__name__)

TIMESERIES_COLUMNS = ["sim_time_ms", "bytes_delivered"]


def _write_csv(path: str, header: List[str], rows: Sequence[Sequence[Any]]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def emit_report(rows: List[MetricsRow], series: List[Tuple[int, int]], path: str,
                trace: ChunkTrace = None, meta: Dict[str, Any] = None) -> List[str]:
    """Write metrics, time series, chunk trace and run metadata under path; returns the files written."""
    os.makedirs(path, exist_ok=True)
    written = []

    metrics_path = os.path.join(path, "metrics.csv")
    _write_csv(metrics_path, METRICS_COLUMNS, [row.as_csv_row() for row in rows])
    written.append(metrics_path)

    series_path = os.path.join(path, "timeseries.csv")
    _write_csv(series_path, TIMESERIES_COLUMNS, series)
    written.append(series_path)

    trace_path = os.path.join(path, "chunk_trace.csv")
    if trace is not None:
        trace.write_csv(trace_path)
    else:
        _write_csv(trace_path, CHUNK_TRACE_COLUMNS, [])
    written.append(trace_path)

    if meta is not None:
        meta_path = os.path.join(path, "run_meta.json")
        with open(meta_path, "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")
        written.append(meta_path)

    logger.info(f"report written to {path}: {', '.join(os.path.basename(p) for p in written)}")
    return written
