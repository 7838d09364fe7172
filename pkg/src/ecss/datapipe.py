"""Request logs to windowed ranking samples.

Pipeline: ``parse_request_log -> filter_catalog -> discretize -> build_samples
-> split_dataset``. Events are held as two parallel numpy arrays rather than
one object per request, since a full MovieLens dump has tens of millions.
"""

from __future__ import annotations

import csv
import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

__all__ = [
    "RequestEvent",
    "EventLog",
    "CatalogFilter",
    "CountMatrix",
    "Sample",
    "DatasetSplit",
    "DataError",
    "parse_request_log",
    "filter_catalog",
    "discretize",
    "make_label",
    "build_samples",
    "split_dataset",
    "normalize_sample",
    "normalize_batch",
    "save_dataset",
    "load_dataset",
    "write_ratings_csv",
]

SECONDS_PER_DAY = 86_400
DATASET_MAGIC = b"ECSSDS01"
MOVIELENS_HEADER = ["userId", "movieId", "rating", "timestamp"]


class DataError(ValueError):
    """Malformed input or a dataset that cannot be built."""


class RequestEvent(NamedTuple):
    file_id: int
    timestamp: int


@dataclass
class EventLog:
    """Requests as parallel arrays, sorted by (timestamp, file_id)."""

    file_ids: np.ndarray
    timestamps: np.ndarray
    user_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.file_ids)

    def __iter__(self) -> Iterator[RequestEvent]:
        for f, t in zip(self.file_ids.tolist(), self.timestamps.tolist()):
            yield RequestEvent(f, t)

    def __getitem__(self, i: int) -> RequestEvent:
        return RequestEvent(int(self.file_ids[i]), int(self.timestamps[i]))

    @property
    def n_files(self) -> int:
        return int(self.file_ids.max()) + 1 if len(self) else 0

    @classmethod
    def from_events(cls, events) -> "EventLog":
        events = list(events)
        f = np.array([e[0] for e in events], dtype=np.int64)
        t = np.array([e[1] for e in events], dtype=np.int64)
        return cls(f, t).sorted()

    def sorted(self) -> "EventLog":
        order = np.lexsort((self.file_ids, self.timestamps))
        users = None if self.user_ids is None else self.user_ids[order]
        return EventLog(self.file_ids[order], self.timestamps[order], users)


@dataclass(frozen=True)
class CatalogFilter:
    min_requests: int = 20
    min_span_days: float = 200
    top_n_files: int | None = None

    def __post_init__(self):
        if self.min_requests < 1:
            raise ValueError("min_requests must be >= 1")
        if self.min_span_days < 0:
            raise ValueError("min_span_days must be >= 0")
        if self.top_n_files is not None and self.top_n_files < 1:
            raise ValueError("top_n_files must be >= 1")


@dataclass
class CountMatrix:
    counts: np.ndarray  # (N_c, N_w) uint32
    window_seconds: int
    epoch_origin: int

    @property
    def n_files(self) -> int:
        return self.counts.shape[0]

    @property
    def n_windows(self) -> int:
        return self.counts.shape[1]


@dataclass
class Sample:
    X: np.ndarray              # (N_c, L) raw counts over the look-back window
    y: np.ndarray              # (N_c,) softmax label of the target window
    target_index: int          # t_u
    target_counts: np.ndarray  # (N_c,) raw counts of window t_u


@dataclass
class DatasetSplit:
    train: list[Sample]
    validation: list[Sample]
    test: list[Sample]
    meta: dict | None = None

    def all_samples(self) -> list[Sample]:
        return self.train + self.validation + self.test

    @property
    def n_files(self) -> int:
        return self.train[0].X.shape[0]

    @property
    def lookback(self) -> int:
        return self.train[0].X.shape[1]


# --------------------------------------------------------------------- parse


def _locate_bad_row(path: Path) -> DataError:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if len(row) != 4:
                    raise ValueError
                int(row[0]), int(row[1]), float(row[2]), int(row[3])
                if int(row[3]) < 0:
                    raise ValueError
            except ValueError:
                return DataError(f"{path}: malformed row at line {lineno}: {','.join(row)!r}")
    return DataError(f"{path}: could not parse")


def parse_request_log(path, format: str = "movielens_csv") -> tuple[EventLog, np.ndarray]:
    """Read a ratings log; every rating counts as one request.

    Returns the events (dense 0-based file ids, sorted by timestamp then
    file id) and the remap table whose entry ``i`` is the original movie id
    of catalog index ``i``, in first-seen order.
    """
    if format != "movielens_csv":
        raise DataError(f"unsupported log format {format!r}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    import pandas as pd

    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if header != MOVIELENS_HEADER:
        raise DataError(f"{path}: expected header {','.join(MOVIELENS_HEADER)}, got {','.join(header)!r}")
    try:
        df = pd.read_csv(path, dtype={"userId": np.int64, "movieId": np.int64,
                                      "rating": np.float64, "timestamp": np.int64})
    except (ValueError, pd.errors.ParserError):
        raise _locate_bad_row(path) from None
    if df.isna().any().any() or (df["timestamp"] < 0).any():
        raise _locate_bad_row(path)
    if len(df) == 0:
        raise DataError(f"{path}: no events")
    movie = df["movieId"].to_numpy()
    remap, dense = np.unique(movie, return_inverse=True)
    # np.unique sorts by value; reorder to first-seen order
    first = np.full(len(remap), len(movie), dtype=np.int64)
    np.minimum.at(first, dense, np.arange(len(movie)))
    by_first = np.argsort(first, kind="stable")
    rank = np.empty_like(by_first)
    rank[by_first] = np.arange(len(by_first))
    log = EventLog(rank[dense].astype(np.int64), df["timestamp"].to_numpy(), df["userId"].to_numpy())
    return log.sorted(), remap[by_first]


def write_ratings_csv(path, file_ids, timestamps, user_ids=None, ratings=None) -> None:
    """Write a MovieLens-style ratings file (used for fixtures and synthetic logs)."""
    file_ids = np.asarray(file_ids)
    timestamps = np.asarray(timestamps)
    user_ids = np.zeros_like(file_ids) if user_ids is None else np.asarray(user_ids)
    ratings = np.full(len(file_ids), 3.0) if ratings is None else np.asarray(ratings)
    buf = io.StringIO()
    buf.write(",".join(MOVIELENS_HEADER) + "\n")
    for u, f, r, t in zip(user_ids.tolist(), file_ids.tolist(), ratings.tolist(), timestamps.tolist()):
        buf.write(f"{u},{f},{r},{t}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# -------------------------------------------------------------------- filter


def filter_catalog(events: EventLog, flt: CatalogFilter = CatalogFilter()) -> tuple[EventLog, np.ndarray]:
    """Keep files with enough requests over a long enough span.

    The returned table maps each new dense id to its id in ``events``.
    Surviving ids keep their relative order.
    """
    n = events.n_files
    counts = np.bincount(events.file_ids, minlength=n)
    first = np.full(n, np.iinfo(np.int64).max)
    last = np.full(n, np.iinfo(np.int64).min)
    np.minimum.at(first, events.file_ids, events.timestamps)
    np.maximum.at(last, events.file_ids, events.timestamps)
    keep = (counts >= flt.min_requests) & ((last - first) >= flt.min_span_days * SECONDS_PER_DAY)
    kept = np.flatnonzero(keep)
    if flt.top_n_files is not None and len(kept) > flt.top_n_files:
        order = np.lexsort((kept, -counts[kept]))
        kept = np.sort(kept[order[:flt.top_n_files]])
    if len(kept) == 0:
        raise DataError("catalog filter left zero files")
    new_id = np.full(n, -1, dtype=np.int64)
    new_id[kept] = np.arange(len(kept))
    mask = new_id[events.file_ids] >= 0
    users = None if events.user_ids is None else events.user_ids[mask]
    out = EventLog(new_id[events.file_ids[mask]], events.timestamps[mask], users)
    return out, kept


# ---------------------------------------------------------------- discretize


def discretize(events: EventLog, window_seconds: int = SECONDS_PER_DAY, n_files: int | None = None,
               origin: int | None = None) -> CountMatrix:
    """Bucket events into ``[origin + jW, origin + (j+1)W)`` windows.

    ``origin`` defaults to the earliest timestamp.
    """
    if window_seconds < 1:
        raise DataError("window_seconds must be >= 1")
    if len(events) == 0:
        raise DataError("no events to discretize")
    first = int(events.timestamps.min())
    origin = first if origin is None else int(origin)
    if origin > first:
        raise DataError(f"origin {origin} is after the first event at {first}")
    win = (events.timestamps - origin) // window_seconds
    n_files = events.n_files if n_files is None else n_files
    n_windows = int(win.max()) + 1
    flat = np.bincount(events.file_ids * n_windows + win, minlength=n_files * n_windows)
    counts = flat.reshape(n_files, n_windows).astype(np.uint32)
    return CountMatrix(counts, int(window_seconds), origin)


# ------------------------------------------------------------------- samples


def make_label(counts) -> np.ndarray:
    """Softmax of raw request counts."""
    c = np.asarray(counts, dtype=np.float64)
    if (c < 0).any():
        raise DataError("counts must be non-negative")
    e = np.exp(c - c.max())
    return e / e.sum()


def build_samples(cm: CountMatrix, lookback: int) -> list[Sample]:
    """One sample per target window ``t_u = L .. N_w - 1``; ``X`` views the count matrix."""
    if lookback < 1:
        raise DataError("lookback must be >= 1")
    if cm.n_windows <= lookback:
        raise DataError(f"insufficient windows: N_w={cm.n_windows} <= L={lookback}")
    counts = cm.counts
    return [Sample(counts[:, t - lookback:t], make_label(counts[:, t]), t, counts[:, t])
            for t in range(lookback, cm.n_windows)]


def split_dataset(samples: list[Sample], fractions=(0.7, 0.1, 0.2)) -> DatasetSplit:
    """Chronological split; train and validation take floors, test takes the rest."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be three positives summing to 1, got {fractions}")
    samples = sorted(samples, key=lambda s: s.target_index)
    m = len(samples)
    n_train = int(np.floor(fractions[0] * m))
    n_val = int(np.floor(fractions[1] * m))
    if n_train == 0 or n_val == 0 or m - n_train - n_val == 0:
        raise DataError(f"split of {m} samples by {fractions} leaves an empty part")
    return DatasetSplit(samples[:n_train], samples[n_train:n_train + n_val], samples[n_train + n_val:])


# ------------------------------------------------------------- normalization

Z_EPS = 1e-6


def normalize_sample(X) -> np.ndarray:
    """Per-file z-score over the look-back window (population std, eps-guarded)."""
    return normalize_batch(np.asarray(X, dtype=np.float64)[None], mode="row")[0]


def normalize_batch(X: np.ndarray, mode: str = "row") -> np.ndarray:
    """z-score a ``(batch, N_c, L)`` stack.

    ``row`` standardizes each file's series on its own; ``sample`` uses one
    mean and std per window stack, which keeps the relative request levels
    between files.
    """
    X = np.asarray(X, dtype=np.float64)
    axes = (-1,) if mode == "row" else (-2, -1)
    if mode not in ("row", "sample"):
        raise ValueError(f"unknown normalization {mode!r}")
    mu = X.mean(axis=axes, keepdims=True)
    sd = X.std(axis=axes, keepdims=True)
    out = (X - mu) / np.maximum(sd, Z_EPS)
    out[np.broadcast_to(sd == 0, out.shape)] = 0.0
    return out


# ------------------------------------------------------------ container file


def _header_bytes(meta: dict) -> bytes:
    return "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")


def _parse_header(raw: bytes) -> dict:
    meta = {}
    for line in raw.decode("utf-8").splitlines():
        if line:
            key, _, val = line.partition("=")
            meta[key] = val
    return meta


def save_dataset(split: DatasetSplit, path, meta: dict | None = None) -> None:
    """Write the ``ECSSDS01`` container atomically.

    Per sample, in chronological order: X as u32 ``(N_c, L)``, the raw target
    counts as u32 ``(N_c,)``, then the label as f64 ``(N_c,)``.
    """
    samples = split.all_samples()
    n_files, lookback = samples[0].X.shape
    header = {
        "n_files": n_files,
        "lookback": lookback,
        "n_samples": len(samples),
        "first_target": samples[0].target_index,
        "n_train": len(split.train),
        "n_validation": len(split.validation),
        "n_test": len(split.test),
    }
    header.update(meta or split.meta or {})
    head = _header_bytes(header)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for s in samples:
            fh.write(np.ascontiguousarray(s.X, dtype="<u4").tobytes())
            fh.write(np.ascontiguousarray(s.target_counts, dtype="<u4").tobytes())
            fh.write(np.ascontiguousarray(s.y, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_dataset(path) -> DatasetSplit:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    raw = path.read_bytes()
    if raw[:8] != DATASET_MAGIC:
        raise DataError(f"{path}: bad magic")
    if len(raw) < 12:
        raise DataError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[8:12])
    meta = _parse_header(raw[12:12 + hlen])
    n_files, lookback = int(meta["n_files"]), int(meta["lookback"])
    n_samples, first = int(meta["n_samples"]), int(meta["first_target"])
    xs = n_files * lookback * 4
    stride = xs + n_files * 4 + n_files * 8
    body = memoryview(raw)[12 + hlen:]
    if len(body) != stride * n_samples:
        raise DataError(f"{path}: truncated body ({len(body)} bytes, expected {stride * n_samples})")
    samples = []
    for i in range(n_samples):
        off = i * stride
        X = np.frombuffer(body, dtype="<u4", count=n_files * lookback, offset=off).reshape(n_files, lookback)
        tc = np.frombuffer(body, dtype="<u4", count=n_files, offset=off + xs)
        y = np.frombuffer(body, dtype="<f8", count=n_files, offset=off + xs + n_files * 4)
        samples.append(Sample(X, y, first + i, tc))
    a, b = int(meta["n_train"]), int(meta["n_validation"])
    return DatasetSplit(samples[:a], samples[a:a + b], samples[a + b:], meta=meta)
