"""Score datasets with a trained model and turn LRP into alarms.

A flag at a window's end timestamp means the 24 hours ending there look
anomalous. Flagging is strict: ``lrp < threshold``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .dataio import ScadaDataset, WindowBatch, format_timestamp, make_windows
from .vae import VaeModel, lrp as _lrp


class ThresholdError(ValueError):
    pass


@dataclass
class LrpSeries:
    end_timestamps: np.ndarray
    lrp: np.ndarray
    model_id: str = ""
    sampling: str = "mode"
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.lrp = np.asarray(self.lrp, float)
        if len(self.end_timestamps) != len(self.lrp):
            raise ValueError("timestamps and lrp differ in length")
        if not np.isfinite(self.lrp).all():
            raise FloatingPointError("LRP series contains non-finite values")

    def __len__(self):
        return len(self.lrp)


@dataclass
class ThresholdSet:
    entries: list  # [(name, value)], strictly decreasing values

    def __post_init__(self):
        self.entries = [(str(n), float(v)) for n, v in self.entries]
        if not self.entries:
            raise ThresholdError("a threshold set needs at least one entry")
        vals = [v for _, v in self.entries]
        if any(not np.isfinite(v) for v in vals):
            raise ThresholdError("thresholds must be finite")
        if any(b >= a for a, b in zip(vals, vals[1:])):
            raise ThresholdError(f"thresholds must be strictly decreasing, got {vals}")
        names = [n for n, _ in self.entries]
        if len(set(names)) != len(names):
            raise ThresholdError("threshold names must be unique")

    @classmethod
    def from_values(cls, values):
        """Sort values descending and name them by value (``t-100`` ...)."""
        vals = sorted({float(v) for v in values}, reverse=True)
        if len(vals) != len(list(values)):
            raise ThresholdError("duplicate threshold values")
        return cls([(f"t{v:g}", v) for v in vals])

    @classmethod
    def parse(cls, text):
        try:
            vals = [float(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise ThresholdError(f"cannot parse thresholds {text!r}") from None
        return cls.from_values(vals)

    @property
    def names(self):
        return [n for n, _ in self.entries]

    @property
    def values(self):
        return np.array([v for _, v in self.entries])


@dataclass
class AlarmSeries:
    thresholds: ThresholdSet
    flags: np.ndarray  # bool [windows, thresholds]

    def column(self, name):
        return self.flags[:, self.thresholds.names.index(name)]


def windows_for(model: VaeModel, ds: ScadaDataset, window_hours=None, stride=1) -> WindowBatch:
    """Window ``ds`` and normalize with the model's own stored statistics."""
    if list(ds.channel_names) != list(model.channel_names):
        if set(model.channel_names) <= set(ds.channel_names):
            ds = ds.select(model.channel_names)
        else:
            missing = sorted(set(model.channel_names) - set(ds.channel_names))
            raise ValueError(f"dataset lacks model channels: {missing}")
    W = window_hours or model.config.window_hours
    return make_windows(ds, W, stride, values=model.normalize(ds.values))


def score_series(model: VaeModel, batch: WindowBatch, sampling="mode") -> LrpSeries:
    if batch.windows.shape[1] != model.config.channels:
        raise ValueError(
            f"model expects {model.config.channels} channels, batch has {batch.windows.shape[1]}")
    values = _lrp(model, batch.windows, sampling)
    return LrpSeries(batch.end_timestamps, values, model.fingerprint(), str(sampling), batch.labels)


def apply_thresholds(series, thresholds: ThresholdSet) -> AlarmSeries:
    x = series.lrp if isinstance(series, LrpSeries) else np.asarray(series, float)
    return AlarmSeries(thresholds, x[:, None] < thresholds.values[None, :])


def quantile_threshold(normal, q) -> float:
    """Lower-tail q-quantile with linear interpolation between order statistics."""
    x = normal.lrp if isinstance(normal, LrpSeries) else np.asarray(normal, float)
    if x.size == 0:
        raise ValueError("cannot take a quantile of an empty series")
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {q}")
    return float(np.quantile(x, q, method="linear"))


# --------------------------------------------------------------------------
# CSV / SVG
# --------------------------------------------------------------------------

def write_lrp_csv(series: LrpSeries, path, thresholds: ThresholdSet | None = None, comments=()):
    alarms = apply_thresholds(series, thresholds) if thresholds else None
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        fh.write(f"# model {series.model_id}\n# sampling {series.sampling}\n")
        if thresholds:
            fh.write("# thresholds " + ",".join(f"{n}={v!r}" for n, v in thresholds.entries) + "\n")
        cols = ["timestamp", "lrp"]
        if thresholds:
            cols += [f"flag_{n}" for n in thresholds.names]
        if series.labels is not None:
            cols.append("label")
        fh.write(",".join(cols) + "\n")
        for i in range(len(series)):
            row = [format_timestamp(series.end_timestamps[i]), repr(float(series.lrp[i]))]
            if alarms is not None:
                row += [str(int(f)) for f in alarms.flags[i]]
            if series.labels is not None:
                row.append(str(int(series.labels[i])))
            fh.write(",".join(row) + "\n")


def read_lrp_csv(path) -> LrpSeries:
    meta, rows = {}, []
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition(" ")
                meta[key] = val
            else:
                lines.append(line)
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or not {"timestamp", "lrp"} <= set(reader.fieldnames):
        raise ValueError(f"{path}: LRP CSV needs timestamp and lrp columns")
    rows = list(reader)
    ts = np.array([np.datetime64(r["timestamp"].replace(" ", "T"), "s") for r in rows],
                  dtype="datetime64[s]")
    vals = np.array([float(r["lrp"]) for r in rows])
    labels = None
    if "label" in reader.fieldnames:
        labels = np.array([int(r["label"]) for r in rows], dtype=np.int8)
    return LrpSeries(ts, vals, meta.get("model", ""), meta.get("sampling", "mode"), labels)


_COLORS = ("#d62728", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2")


def write_svg(series: LrpSeries, path, thresholds: ThresholdSet | None = None,
              width=1000, height=360, floor=None):
    """Line plot of LRP with horizontal threshold rules and attack shading."""
    y = series.lrp.copy()
    n = len(y)
    if floor is not None:
        y = np.maximum(y, floor)
    lo = min(y.min(), *(thresholds.values if thresholds else [y.min()]))
    hi = max(y.max(), *(thresholds.values if thresholds else [y.max()]))
    if hi == lo:
        hi = lo + 1.0
    m = 40

    def px(i):
        return m + (width - 2 * m) * (i / max(n - 1, 1))

    def py(v):
        return height - m - (height - 2 * m) * ((v - lo) / (hi - lo))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    if series.labels is not None:
        lab = np.asarray(series.labels) == 1
        i = 0
        while i < n:
            if lab[i]:
                j = i
                while j + 1 < n and lab[j + 1]:
                    j += 1
                out.append(f'<rect x="{px(i):.2f}" y="{m}" width="{max(px(j) - px(i), 1):.2f}" '
                           f'height="{height - 2 * m}" fill="#cccccc" opacity="0.5"/>')
                i = j
            i += 1
    pts = " ".join(f"{px(i):.2f},{py(v):.2f}" for i, v in enumerate(y))
    out.append(f'<polyline fill="none" stroke="#1f77b4" stroke-width="1" points="{pts}"/>')
    if thresholds:
        for k, (name, v) in enumerate(thresholds.entries):
            c = _COLORS[k % len(_COLORS)]
            out.append(f'<polyline fill="none" stroke="{c}" stroke-dasharray="4 3" '
                       f'points="{m},{py(v):.2f} {width - m},{py(v):.2f}"/>')
            out.append(f'<text x="{width - m + 2}" y="{py(v):.2f}" font-size="10" fill="{c}">'
                       f'{name}</text>')
    out.append(f'<text x="{m}" y="{m - 10}" font-size="12">LRP ({n} windows)</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
