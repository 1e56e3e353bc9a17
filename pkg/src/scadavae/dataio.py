"""Hourly SCADA tables: CSV loading, z-score normalization, rolling windows."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NORMAL, ATTACK, UNLABELED = 0, 1, -1
STD_FLOOR = 1e-6
HOUR = np.timedelta64(1, "h")


class DataError(ValueError):
    """Base class for dataset problems; messages carry row numbers where relevant."""


class MissingColumn(DataError):
    pass


class BadValue(DataError):
    pass


class TimestampGap(DataError):
    pass


class DuplicateTimestamp(DataError):
    pass


@dataclass
class ColumnMap:
    """How to read a CSV: which column is time, which are channels, which is the label."""

    timestamp: str = "timestamp"
    channels: list | None = None  # None -> every column except timestamp and label
    label: str | None = None
    attack_values: list = field(default_factory=lambda: ["1"])
    unlabeled_values: list = field(default_factory=lambda: ["-999", "-1"])
    timestamp_format: str | None = None  # None -> ISO 8601

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown column-map keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("attack_values", "unlabeled_values"):
            if key in d:
                d[key] = [str(v) for v in d[key]]
        return cls(**d)

    def to_dict(self):
        return dataclasses.asdict(self)


BATADAL_COLUMNS = ColumnMap(timestamp="DATETIME", label="ATT_FLAG", attack_values=["1"],
                            unlabeled_values=["-999"], timestamp_format="%d/%m/%y %H")


@dataclass
class ScadaDataset:
    timestamps: np.ndarray  # datetime64[s], strictly hourly
    channel_names: list
    values: np.ndarray  # [T, channels]
    labels: np.ndarray | None = None  # int8 in {NORMAL, ATTACK, UNLABELED}

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[s]")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.channel_names):
            raise DataError(f"values shape {self.values.shape} does not match "
                            f"{len(self.channel_names)} channels")
        if len(self.timestamps) != self.values.shape[0]:
            raise DataError("timestamp count differs from row count")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int8)
            if len(self.labels) != len(self.timestamps):
                raise DataError("label count differs from row count")
        steps = np.diff(self.timestamps)
        if steps.size and not (steps == HOUR).all():
            i = int(np.argmax(steps != HOUR))
            raise TimestampGap(f"non-hourly step between {self.timestamps[i]} and "
                               f"{self.timestamps[i + 1]}")

    def __len__(self):
        return len(self.timestamps)

    def channel(self, name):
        try:
            return self.values[:, self.channel_names.index(name)]
        except ValueError:
            raise MissingColumn(f"channel {name!r} not in dataset") from None

    def slice(self, rows: slice) -> "ScadaDataset":
        return ScadaDataset(self.timestamps[rows], list(self.channel_names), self.values[rows],
                            None if self.labels is None else self.labels[rows])

    def select(self, names) -> "ScadaDataset":
        idx = []
        for n in names:
            if n not in self.channel_names:
                raise MissingColumn(f"channel {n!r} not in dataset")
            idx.append(self.channel_names.index(n))
        return ScadaDataset(self.timestamps, list(names), self.values[:, idx], self.labels)

    def equals(self, other) -> bool:
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None
            and np.array_equal(self.labels, other.labels))
        return (self.channel_names == other.channel_names
                and np.array_equal(self.timestamps, other.timestamps)
                and np.array_equal(self.values, other.values) and same_labels)


def _parse_time(text, fmt, row):
    try:
        if fmt:
            return np.datetime64(datetime.strptime(text.strip(), fmt), "s")
        return np.datetime64(datetime.fromisoformat(text.strip()), "s")
    except ValueError:
        raise BadValue(f"row {row}: unparseable timestamp {text!r}") from None


def load_csv(path, mapping: ColumnMap | None = None) -> ScadaDataset:
    """Read an hourly CSV; lines starting with ``#`` are provenance comments."""
    mapping = mapping or ColumnMap()
    path = Path(path)
    with path.open(newline="") as fh:
        lines = (ln for ln in fh if not ln.startswith("#"))
        reader = csv.reader(lines)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        col = {name: i for i, name in enumerate(header)}
        for needed in [mapping.timestamp] + ([mapping.label] if mapping.label else []):
            if needed not in col:
                raise MissingColumn(f"{path}: column {needed!r} not found in header")
        if mapping.channels is None:
            channels = [h for h in header if h not in (mapping.timestamp, mapping.label)]
        else:
            channels = list(mapping.channels)
            for c in channels:
                if c not in col:
                    raise MissingColumn(f"{path}: column {c!r} not found in header")
        ci = [col[c] for c in channels]
        ti = col[mapping.timestamp]
        li = col[mapping.label] if mapping.label else None
        attack = {str(v).strip() for v in mapping.attack_values}
        unlabeled = {str(v).strip() for v in mapping.unlabeled_values}

        times, rows, labels = [], [], []
        for row_no, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(header):
                raise BadValue(f"{path}: row {row_no} has {len(rec)} fields, header has {len(header)}")
            t = _parse_time(rec[ti], mapping.timestamp_format, row_no)
            if times and t == times[-1]:
                raise DuplicateTimestamp(f"{path}: row {row_no}: duplicate timestamp {t}")
            if times and t - times[-1] != HOUR:
                raise TimestampGap(f"{path}: row {row_no}: gap between {times[-1]} and {t}")
            vals = []
            for c, i in zip(channels, ci):
                try:
                    v = float(rec[i])
                except ValueError:
                    raise BadValue(f"{path}: row {row_no}: column {c!r}: "
                                   f"unparseable number {rec[i]!r}") from None
                if not np.isfinite(v):
                    raise BadValue(f"{path}: row {row_no}: column {c!r}: non-finite value")
                vals.append(v)
            times.append(t)
            rows.append(vals)
            if li is not None:
                raw = rec[li].strip()
                labels.append(ATTACK if raw in attack else UNLABELED if raw in unlabeled else NORMAL)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return ScadaDataset(np.array(times, dtype="datetime64[s]"), channels,
                        np.array(rows, dtype=np.float64),
                        np.array(labels, dtype=np.int8) if li is not None else None)


def format_timestamp(t) -> str:
    return str(np.datetime64(t, "s")).replace("T", " ")


def write_csv(ds: ScadaDataset, path, label_column="label", comments=()):
    """Write a dataset in the layout :func:`load_csv` reads with the default map."""
    path = Path(path)
    if str(path) in ("", "."):
        raise ValueError("empty output path")
    with path.open("w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        head = ["timestamp"] + list(ds.channel_names)
        if ds.labels is not None:
            head.append(label_column)
        w.writerow(head)
        for i in range(len(ds)):
            row = [format_timestamp(ds.timestamps[i])] + [repr(float(v)) for v in ds.values[i]]
            if ds.labels is not None:
                row.append(int(ds.labels[i]))
            w.writerow(row)


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------

@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


def fit_stats(ds: ScadaDataset, rows: slice = slice(None)) -> ChannelStats:
    v = ds.values[rows]
    if v.shape[0] == 0:
        raise DataError("fit_stats: empty range")
    return ChannelStats(v.mean(axis=0), np.maximum(v.std(axis=0), STD_FLOOR))


def normalize(ds_or_values, stats: ChannelStats) -> np.ndarray:
    v = ds_or_values.values if isinstance(ds_or_values, ScadaDataset) else np.asarray(ds_or_values)
    return (v - stats.mean) / stats.std


# --------------------------------------------------------------------------
# windows
# --------------------------------------------------------------------------

@dataclass
class WindowBatch:
    windows: np.ndarray  # [N, channels, W]
    end_timestamps: np.ndarray
    labels: np.ndarray | None = None  # window-level, any-hour rule

    def __len__(self):
        return self.windows.shape[0]


def window_count(T, window_hours, stride=1):
    return (T - window_hours) // stride + 1 if T >= window_hours else 0


def window_labels(labels, window_hours, stride=1):
    """Attack if any hour is attack; else unlabeled if any hour is; else normal."""
    lab = np.asarray(labels)
    view = sliding_window_view(lab, window_hours)[::stride]
    out = np.full(view.shape[0], NORMAL, dtype=np.int8)
    out[(view == UNLABELED).any(axis=1)] = UNLABELED
    out[(view == ATTACK).any(axis=1)] = ATTACK
    return out


def make_windows(ds: ScadaDataset, window_hours=24, stride=1, stats: ChannelStats | None = None,
                 values: np.ndarray | None = None) -> WindowBatch:
    """Cut contiguous ``window_hours`` slices every ``stride`` hours.

    ``values`` overrides ``ds.values`` (e.g. pre-normalized); ``stats``
    normalizes on the fly.
    """
    if window_hours < 1 or stride < 1:
        raise ValueError("window_hours and stride must be positive")
    T = len(ds)
    if T < window_hours:
        raise DataError(f"series of {T} hours is shorter than a {window_hours}-hour window")
    v = ds.values if values is None else np.asarray(values, float)
    if stats is not None:
        v = normalize(v, stats)
    win = sliding_window_view(v, window_hours, axis=0)[::stride]  # [N, C, W]
    ends = ds.timestamps[window_hours - 1::stride][:win.shape[0]]
    labels = None if ds.labels is None else window_labels(ds.labels, window_hours, stride)
    return WindowBatch(np.ascontiguousarray(win), ends, labels)


def split(ds: ScadaDataset, fraction: float, window_hours=24):
    """Chronological split into ``(train_rows, holdout_rows)`` slices."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must lie in (0, 1), got {fraction}")
    T = len(ds)
    cut = int(round(T * fraction))
    if cut < window_hours or T - cut < window_hours:
        raise DataError(f"split at {cut}/{T} leaves fewer than {window_hours} rows on one side")
    return slice(0, cut), slice(cut, T)
