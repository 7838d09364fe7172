"""Synthetic request streams with known popularity structure."""

from __future__ import annotations

import numpy as np

from .datapipe import CountMatrix, EventLog
from .numcore import seeded_rng

__all__ = ["zipf_popularity", "zipf_counts", "rotating_counts", "counts_to_events"]


def zipf_popularity(n_files: int, s: float = 1.0) -> np.ndarray:
    w = 1.0 / np.arange(1, n_files + 1, dtype=np.float64) ** s
    return w / w.sum()


def zipf_counts(n_files: int = 50, n_windows: int = 600, requests_per_window: int = 400,
                s: float = 1.0, window_seconds: int = 3600, seed: int = 0) -> CountMatrix:
    """Stationary stream: each window draws a multinomial over Zipf(s) popularity; file 0 is hottest."""
    rng = seeded_rng(seed)
    p = zipf_popularity(n_files, s)
    counts = rng.multinomial(requests_per_window, p, size=n_windows).T.astype(np.uint32)
    return CountMatrix(counts, window_seconds, 0)


def rotating_counts(n_files: int = 50, n_windows: int = 600, requests_per_window: int = 400,
                    hot: int = 10, period: int = 50, hot_share: float = 0.8,
                    window_seconds: int = 3600, seed: int = 0) -> CountMatrix:
    """Trend-shifting stream: a block of ``hot`` files takes ``hot_share`` of the
    traffic and the block moves to the next ``hot`` files every ``period`` windows."""
    rng = seeded_rng(seed)
    n_groups = n_files // hot
    counts = np.empty((n_files, n_windows), dtype=np.uint32)
    for j in range(n_windows):
        g = (j // period) % n_groups
        p = np.full(n_files, (1.0 - hot_share) / (n_files - hot))
        p[g * hot:(g + 1) * hot] = hot_share / hot
        counts[:, j] = rng.multinomial(requests_per_window, p)
    return CountMatrix(counts, window_seconds, 0)


def counts_to_events(cm: CountMatrix, seed: int = 0) -> EventLog:
    """Expand counts into timestamped requests inside their windows.

    One request is pinned to offset 0 so the log's first timestamp sits on
    the window grid and re-discretizing reproduces ``cm`` exactly.
    """
    rng = seeded_rng(seed)
    files, wins = np.nonzero(cm.counts)
    reps = cm.counts[files, wins].astype(np.int64)
    f = np.repeat(files, reps)
    w = np.repeat(wins, reps)
    offsets = rng.integers(0, cm.window_seconds, size=len(f))
    if len(f):
        offsets[np.argmin(w)] = 0
    return EventLog(f.astype(np.int64), cm.epoch_origin + w * cm.window_seconds + offsets).sorted()
