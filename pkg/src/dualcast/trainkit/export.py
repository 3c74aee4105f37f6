"""Per-sample branch embeddings as CSV, for external visualisation tools."""
from __future__ import annotations

import csv

import numpy as np

from ..data import WindowSet
from ..ndtensor import no_grad


def branch_embeddings(model, windows: WindowSet, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Pooled intrinsic and environment representations, each (S, D)."""
    g_i, g_e = [], []
    with no_grad():
        for batch in windows.batches(batch_size):
            out = model(batch.x, batch.pattern_ids)
            g_i.append(out.g_i.data)
            g_e.append(out.g_e.data)
    return np.concatenate(g_i), np.concatenate(g_e)


def export_embeddings(model, windows: WindowSet, path, batch_size: int = 256) -> int:
    """One row per window: idx, start timestamp, pattern id, incident flag,
    then D columns of g_i and D columns of g_e. Returns the row count."""
    g_i, g_e = branch_embeddings(model, windows, batch_size)
    d = g_i.shape[1]
    header = ["idx", "start_timestamp", "pattern_id", "incident"]
    header += [f"gi_{j}" for j in range(d)] + [f"ge_{j}" for j in range(d)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in range(len(windows)):
            writer.writerow([s, windows.start_times[s].isoformat(), int(windows.pattern_ids[s]),
                             int(windows.incident[s])] + [repr(float(v)) for v in g_i[s]]
                            + [repr(float(v)) for v in g_e[s]])
    return len(windows)
