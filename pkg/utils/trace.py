"""
Helpers for recording chunk events and summarising measurements
"""
import csv
from typing import Iterable, List, Optional, Tuple

import numpy as np

CHUNK_TRACE_COLUMNS = ["sim_time_ms", "direction", "kind", "asconf_op", "tsn", "path_index", "bundled"]


class ChunkTrace:
    """In-memory sink for one row per transmitted chunk, written out as CSV."""

    def __init__(self):
        self.rows: List[Tuple] = []

    def record(self, sim_time: int, direction: str, kind: str, asconf_op: Optional[str],
               tsn: Optional[int], path_index: Optional[int], bundled: bool):
        self.rows.append((int(sim_time), direction, kind, asconf_op or "",
                          "" if tsn is None else int(tsn),
                          "" if path_index is None else int(path_index),
                          int(bool(bundled))))

    def kinds(self) -> List[str]:
        return [row[2] for row in self.rows]

    def of_kind(self, kind: str) -> List[Tuple]:
        return [row for row in self.rows if row[2] == kind]

    def write_csv(self, path: str):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CHUNK_TRACE_COLUMNS)
            writer.writerows(self.rows)

    def __len__(self):
        return len(self.rows)


def mean(values: Iterable[float]) -> float:
    """Arithmetic mean; 0.0 for an empty input."""
    values = list(values)
    return float(np.mean(values)) if values else 0.0
