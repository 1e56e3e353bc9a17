"""Rule-violation baseline: flag physically or operationally impossible readings.

Five families are checked hour by hour (tank limits, control rules, mass
balance, head feasibility, pump curves); their OR is then back-smoothed so
each raw violation also marks the preceding ``back_hours``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import MissingColumn, ScadaDataset

FAMILIES = ("tank_limit", "control_rule", "mass_balance", "head_feasibility", "pump_curve")


class MetaError(ValueError):
    pass


@dataclass
class Tank:
    name: str
    level_channel: str
    diameter: float
    min_level: float
    max_level: float
    elevation: float = 0.0

    @property
    def area(self):
        return math.pi * (self.diameter / 2.0) ** 2


@dataclass
class Pump:
    name: str
    status_channel: str
    flow_channel: str
    curve: list  # [a, b, c] for head gain = a - b * flow**c


@dataclass
class PumpStation:
    name: str
    inlet_channel: str
    outlet_channel: str
    pumps: list


@dataclass
class ControlRule:
    actuator: str  # status channel
    comparison: str  # "above" | "below"
    tank: str
    level: float
    expected_status: int


@dataclass
class Tolerances:
    mass_balance_rel: float = 0.05
    mass_balance_horizon: int = 24
    head: float = 0.5
    pump_rel: float = 0.10
    pump_abs: float = 2.0


@dataclass
class NetworkMeta:
    tanks: list
    pump_stations: list
    control_rules: list = field(default_factory=list)
    head_sensors: dict = field(default_factory=dict)  # pressure channel -> elevation
    head_pairs: list = field(default_factory=list)  # (upstream, downstream) channel pairs
    station_pump_map: dict = field(default_factory=dict)  # station -> fed tanks
    pressure_to_head: float = 1.0
    flow_to_volume: float = 1.0  # flow units -> volume per hour
    tolerances: Tolerances = field(default_factory=Tolerances)

    @classmethod
    def from_dict(cls, d):
        try:
            tanks = [Tank(**t) for t in d["tanks"]]
            stations = [PumpStation(s["name"], s["inlet_channel"], s["outlet_channel"],
                                    [Pump(**p) for p in s.get("pumps", [])])
                        for s in d.get("pump_stations", [])]
            rules = [ControlRule(**r) for r in d.get("control_rules", [])]
            pairs = [(p["upstream"], p["downstream"]) if isinstance(p, dict) else tuple(p)
                     for p in d.get("head_pairs", [])]
            meta = cls(tanks, stations, rules, dict(d.get("head_sensors", {})), pairs,
                       {k: list(v) for k, v in d.get("station_pump_map", {}).items()},
                       float(d.get("pressure_to_head", 1.0)), float(d.get("flow_to_volume", 1.0)),
                       Tolerances(**d.get("tolerances", {})))
        except (KeyError, TypeError) as exc:
            raise MetaError(f"malformed network metadata: {exc}") from None
        meta.validate()
        return meta

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise MetaError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(d)

    def validate(self):
        names = {t.name for t in self.tanks}
        for t in self.tanks:
            vals = (t.diameter, t.min_level, t.max_level, t.elevation)
            if not all(math.isfinite(v) for v in vals):
                raise MetaError(f"tank {t.name}: non-finite geometry")
            if t.max_level <= t.min_level:
                raise MetaError(f"tank {t.name}: max level must exceed min level")
        for r in self.control_rules:
            if r.tank not in names:
                raise MetaError(f"control rule refers to unknown tank {r.tank!r}")
            if r.comparison not in ("above", "below"):
                raise MetaError(f"control rule comparison must be above/below, got {r.comparison!r}")
        stations = {s.name for s in self.pump_stations}
        for s, fed in self.station_pump_map.items():
            if s not in stations or not set(fed) <= names:
                raise MetaError(f"station_pump_map entry {s!r} -> {fed} names unknown items")
        for s in self.pump_stations:
            for p in s.pumps:
                if len(p.curve) != 3 or not all(math.isfinite(c) for c in p.curve):
                    raise MetaError(f"pump {p.name}: curve needs three finite coefficients")

    def channels(self):
        out = {t.level_channel for t in self.tanks}
        for s in self.pump_stations:
            out |= {s.inlet_channel, s.outlet_channel}
            for p in s.pumps:
                out |= {p.status_channel, p.flow_channel}
        out |= {r.actuator for r in self.control_rules}
        for a, b in self.head_pairs:
            out |= {a, b}
        return out

    def check_channels(self, ds: ScadaDataset):
        missing = sorted(self.channels() - set(ds.channel_names))
        if missing:
            raise MissingColumn(f"dataset lacks channels required by metadata: {missing}")

    def head(self, ds, channel):
        if channel not in self.head_sensors:
            raise MetaError(f"no elevation for pressure sensor {channel!r} in head_sensors")
        return self.head_sensors[channel] + self.pressure_to_head * ds.channel(channel)


@dataclass
class RuleFlags:
    families: dict  # family -> bool[T]
    combined: np.ndarray
    smoothed: np.ndarray


def _on(x):
    return np.asarray(x) >= 0.5


def check_tank_limits(ds: ScadaDataset, meta: NetworkMeta) -> np.ndarray:
    flags = np.zeros(len(ds), bool)
    for t in meta.tanks:
        lv = ds.channel(t.level_channel)
        flags |= (lv < t.min_level) | (lv > t.max_level)
    return flags


def check_control_rules(ds: ScadaDataset, meta: NetworkMeta) -> np.ndarray:
    """Condition true at ``h-1`` and actuator contradicting the rule at ``h``."""
    flags = np.zeros(len(ds), bool)
    tanks = {t.name: t for t in meta.tanks}
    for r in meta.control_rules:
        lv = ds.channel(tanks[r.tank].level_channel)
        cond = lv > r.level if r.comparison == "above" else lv < r.level
        wrong = _on(ds.channel(r.actuator)) != bool(r.expected_status)
        flags[1:] |= cond[:-1] & wrong[1:]
    return flags


def check_mass_balance(ds: ScadaDataset, meta: NetworkMeta, horizon: int | None = None) -> np.ndarray:
    """Stored volume gain over the horizon must not exceed pumped volume by > tol."""
    H = meta.tolerances.mass_balance_horizon if horizon is None else horizon
    T = len(ds)
    flags = np.zeros(T, bool)
    fed = {tank for tanks in meta.station_pump_map.values() for tank in tanks}
    if not fed or T <= H:
        return flags
    tanks = {t.name: t for t in meta.tanks}
    stored = np.zeros(T - H)
    for name in sorted(fed):
        t = tanks[name]
        lv = ds.channel(t.level_channel)
        stored += t.area * (lv[H:] - lv[:-H])
    hourly = np.zeros(T)
    for s in meta.pump_stations:
        if s.name in meta.station_pump_map:
            for p in s.pumps:
                hourly += meta.flow_to_volume * ds.channel(p.flow_channel)
    c = np.concatenate([[0.0], np.cumsum(hourly)])
    pumped = c[H:T] - c[:T - H]  # hours h-H .. h-1 for h = H .. T-1
    flags[H:] = stored > pumped * (1.0 + meta.tolerances.mass_balance_rel)
    return flags


def check_head_feasibility(ds: ScadaDataset, meta: NetworkMeta) -> np.ndarray:
    flags = np.zeros(len(ds), bool)
    for up, down in meta.head_pairs:
        flags |= meta.head(ds, down) > meta.head(ds, up) + meta.tolerances.head
    return flags


def check_pump_curve(ds: ScadaDataset, meta: NetworkMeta) -> np.ndarray:
    """Measured station head gain vs curve-predicted gain for every running pump."""
    tol = meta.tolerances
    flags = np.zeros(len(ds), bool)
    for s in meta.pump_stations:
        if not s.pumps:
            continue
        measured = meta.head(ds, s.outlet_channel) - meta.head(ds, s.inlet_channel)
        for p in s.pumps:
            q = ds.channel(p.flow_channel)
            running = _on(ds.channel(p.status_channel)) & (q > 0)
            a, b, c = p.curve
            expected = a - b * np.power(np.where(running, q, 0.0), c)
            bound = np.maximum(tol.pump_rel * np.abs(expected), tol.pump_abs)
            flags |= running & (np.abs(measured - expected) > bound)
    return flags


def smooth_flags(raw, back_hours=48):
    """Smoothed[h] = any(raw[h .. h + back_hours]).

    Given a :class:`RuleFlags`, the smoothed field is recomputed from the raw
    combined flag, so smoothing a result again changes nothing.
    """
    if isinstance(raw, RuleFlags):
        return RuleFlags(raw.families, raw.combined, smooth_flags(raw.combined, back_hours))
    raw = np.asarray(raw, bool)
    if back_hours <= 0 or raw.size == 0:
        return raw.copy()
    c = np.concatenate([[0], np.cumsum(raw[::-1])])
    n = raw.size
    idx = np.arange(n)
    # reversed index r = n-1-h; window raw[h..h+k] -> reversed [r-k .. r]
    r = n - 1 - idx
    lo = np.maximum(r - back_hours, 0)
    return (c[r + 1] - c[lo]) > 0


def run_rules(ds: ScadaDataset, meta: NetworkMeta, back_hours=48) -> RuleFlags:
    meta.check_channels(ds)
    fam = {
        "tank_limit": check_tank_limits(ds, meta),
        "control_rule": check_control_rules(ds, meta),
        "mass_balance": check_mass_balance(ds, meta),
        "head_feasibility": check_head_feasibility(ds, meta),
        "pump_curve": check_pump_curve(ds, meta),
    }
    combined = np.zeros(len(ds), bool)
    for f in fam.values():
        combined |= f
    return RuleFlags(fam, combined, smooth_flags(combined, back_hours))


def write_flags_csv(ds: ScadaDataset, flags: RuleFlags, path, comments=()):
    from .dataio import format_timestamp
    with open(path, "w") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        cols = list(FAMILIES) + ["combined", "smoothed"]
        if ds.labels is not None:
            cols.append("label")
        fh.write("timestamp," + ",".join(cols) + "\n")
        for h in range(len(ds)):
            vals = [int(flags.families[f][h]) for f in FAMILIES]
            vals += [int(flags.combined[h]), int(flags.smoothed[h])]
            if ds.labels is not None:
                vals.append(int(ds.labels[h]))
            fh.write(format_timestamp(ds.timestamps[h]) + "," + ",".join(map(str, vals)) + "\n")
