"""Surrogate tank/pump network with threshold-tampering attacks.

Tanks are fed by on/off pumps under hysteresis control and drained by a
noisy diurnal demand. Pumps sit in stations that share inlet/outlet pressure
sensors. Attacks replace one pump's on- or off-threshold for an interval,
optionally concealing chosen channels by replay or offset.

Not a hydraulic solver: it reproduces the feedback structure that makes
threshold attacks observable, nothing more.
"""
from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._jit import njit
from .dataio import ATTACK, NORMAL, ScadaDataset, write_csv

MIN_ATTACK_GAP = 72


class ScenarioError(ValueError):
    pass


@dataclass
class TankSpec:
    name: str
    area: float  # m^2
    initial_level: float
    min_level: float
    max_level: float
    elevation: float = 0.0
    height: float | None = None  # physical rim; default max_level + 1
    demand_pattern: list = field(default_factory=lambda: [0.0] * 24)  # m^3/h by hour of day

    @property
    def rim(self):
        return self.max_level + 1.0 if self.height is None else self.height


@dataclass
class StationSpec:
    name: str
    inlet_head: float  # hydraulic head at the suction side, m
    elevation: float = 0.0


@dataclass
class PumpSpec:
    name: str
    tank: str
    station: str
    rated_flow: float  # m^3/h
    head_gain: float  # m
    on_below: float
    off_above: float


@dataclass
class SynthNetworkSpec:
    tanks: list
    stations: list
    pumps: list
    demand_noise: float = 0.02
    level_noise: float = 0.01
    head_noise: float = 0.05
    flow_noise: float = 0.01  # relative
    warmup_hours: int = 48
    start: str = "2014-01-01T00:00:00"
    seed: int = 0

    def __post_init__(self):
        self.tanks = [t if isinstance(t, TankSpec) else TankSpec(**t) for t in self.tanks]
        self.stations = [s if isinstance(s, StationSpec) else StationSpec(**s) for s in self.stations]
        self.pumps = [p if isinstance(p, PumpSpec) else PumpSpec(**p) for p in self.pumps]
        self.validate()

    def validate(self):
        names = {t.name for t in self.tanks}
        stations = {s.name for s in self.stations}
        for t in self.tanks:
            if not t.min_level < t.initial_level < t.max_level:
                raise ScenarioError(f"tank {t.name}: need min < initial < max level")
            if t.area <= 0 or t.rim < t.max_level:
                raise ScenarioError(f"tank {t.name}: area must be positive and rim >= max level")
            if len(t.demand_pattern) != 24 or min(t.demand_pattern) < 0:
                raise ScenarioError(f"tank {t.name}: demand pattern needs 24 non-negative values")
        for p in self.pumps:
            if p.tank not in names or p.station not in stations:
                raise ScenarioError(f"pump {p.name}: unknown tank or station")
            if p.rated_flow <= 0:
                raise ScenarioError(f"pump {p.name}: rated flow must be positive")
            if p.on_below > p.off_above:
                raise ScenarioError(f"pump {p.name}: on_below must not exceed off_above")

    def channel_names(self):
        out = [f"L_{t.name}" for t in self.tanks]
        for p in self.pumps:
            out += [f"S_{p.name}", f"F_{p.name}"]
        for s in self.stations:
            out += [f"P_{s.name}_in", f"P_{s.name}_out"]
        return out

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown network keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ScenarioError(str(exc)) from None


@dataclass
class AttackSpec:
    start: int
    duration: int
    pump: str
    rule: str  # "on_below" | "off_above"
    value: float
    concealment: str = "none"  # none | replay | offset
    channels: list = field(default_factory=list)
    source_start: int | None = None  # replay: first hour of the historic window
    offset: float = 0.0

    def __post_init__(self):
        if self.start < 0 or self.duration < 1:
            raise ScenarioError("attack needs start >= 0 and duration >= 1")
        if self.rule not in ("on_below", "off_above"):
            raise ScenarioError(f"attack rule must be on_below or off_above, got {self.rule!r}")
        if self.concealment not in ("none", "replay", "offset"):
            raise ScenarioError(f"unknown concealment {self.concealment!r}")
        if self.concealment == "replay" and self.source_start is None:
            raise ScenarioError("replay concealment needs source_start")

    @property
    def end(self):
        return self.start + self.duration


@dataclass
class SimulationTrace:
    """True (noise-free) quantities behind an emitted dataset."""

    level: np.ndarray  # [hours + 1, tanks], level at the start of each hour
    demand: np.ndarray  # [hours, tanks], m^3 drawn during each hour
    inflow: np.ndarray  # [hours, tanks], m^3 pumped during each hour
    status: np.ndarray  # [hours, pumps]
    clamped: np.ndarray  # [hours], 1 overflow, -1 empty, 0 none


@njit
def _run_kernel(level0, area, rim, pump_tank, rated, on_thr, off_thr, demand, meas_noise):
    """Hourly stepping; controllers act on the measured level of their tank."""
    H, n_tank = demand.shape
    n_pump = pump_tank.shape[0]
    level = np.empty((H + 1, n_tank))
    status = np.zeros((H, n_pump))
    inflow = np.zeros((H, n_tank))
    clamped = np.zeros(H, dtype=np.int8)
    level[0] = level0
    state = np.zeros(n_pump)
    for t in range(H):
        for p in range(n_pump):
            k = pump_tank[p]
            m = level[t, k] + meas_noise[t, k]
            if m < on_thr[t, p]:
                state[p] = 1.0
            elif m > off_thr[t, p]:
                state[p] = 0.0
            status[t, p] = state[p]
            inflow[t, k] += rated[p] * state[p]
        for k in range(n_tank):
            nxt = level[t, k] + (inflow[t, k] - demand[t, k]) / area[k]
            if nxt > rim[k]:
                nxt = rim[k]
                clamped[t] = 1
            elif nxt < 0.0:
                nxt = 0.0
                clamped[t] = -1
            level[t + 1, k] = nxt
    return level, status, inflow, clamped


def _threshold_tracks(spec, attacks, total, offset):
    n = len(spec.pumps)
    on = np.tile([p.on_below for p in spec.pumps], (total, 1)).astype(float)
    off = np.tile([p.off_above for p in spec.pumps], (total, 1)).astype(float)
    index = {p.name: i for i, p in enumerate(spec.pumps)}
    for a in attacks:
        if a.pump not in index:
            raise ScenarioError(f"attack targets unknown pump {a.pump!r}")
        i = index[a.pump]
        track = on if a.rule == "on_below" else off
        original = track[0, i]
        if a.value == original:
            raise ScenarioError(f"attack on {a.pump}.{a.rule}: tampered value equals original")
        track[offset + a.start:offset + a.end, i] = a.value
    assert on.shape == (total, n)
    return on, off


def _check_attacks(attacks, hours):
    for a in attacks:
        if a.end > hours:
            raise ScenarioError(f"attack [{a.start}, {a.end}) exceeds {hours} simulated hours")
    by_rule = {}
    for a in sorted(attacks, key=lambda a: a.start):
        key = (a.pump, a.rule)
        prev = by_rule.get(key)
        if prev is not None and a.start < prev.end:
            raise ScenarioError(f"overlapping attacks on {a.pump}.{a.rule}")
        by_rule[key] = a
    ordered = sorted(attacks, key=lambda a: a.start)
    for a, b in zip(ordered, ordered[1:]):
        if b.start - a.end < MIN_ATTACK_GAP:
            warnings.warn(f"only {b.start - a.end} h between attacks ending at {a.end} and "
                          f"starting at {b.start}; disturbances may overlap", stacklevel=3)


def simulate_trace(spec: SynthNetworkSpec, hours: int, attacks=(), seed=None):
    """Run the surrogate; returns ``(dataset, trace)``. ``seed=None`` uses ``spec.seed``."""
    if hours < 24:
        raise ScenarioError("simulate at least 24 hours")
    attacks = [a if isinstance(a, AttackSpec) else AttackSpec(**a) for a in attacks]
    _check_attacks(attacks, hours)
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    W = spec.warmup_hours
    total = hours + W
    n_tank, n_pump, n_st = len(spec.tanks), len(spec.pumps), len(spec.stations)

    # all randomness is drawn up front, in a fixed order
    demand_eps = rng.standard_normal((total, n_tank))
    level_eps = rng.standard_normal((total, n_tank))
    flow_eps = rng.standard_normal((total, n_pump))
    head_eps = rng.standard_normal((total, n_st, 2))

    pattern = np.array([t.demand_pattern for t in spec.tanks], float).T  # [24, tanks]
    hod = np.arange(total) % 24
    demand = np.maximum(pattern[hod] * (1.0 + spec.demand_noise * demand_eps), 0.0)
    meas_noise = spec.level_noise * level_eps
    tank_idx = {t.name: i for i, t in enumerate(spec.tanks)}
    pump_tank = np.array([tank_idx[p.tank] for p in spec.pumps], dtype=np.int64)
    on, off = _threshold_tracks(spec, attacks, total, W)
    level, status, inflow, clamped = _run_kernel(
        np.array([t.initial_level for t in spec.tanks], float),
        np.array([t.area for t in spec.tanks], float),
        np.array([t.rim for t in spec.tanks], float),
        pump_tank, np.array([p.rated_flow for p in spec.pumps], float),
        on, off, demand, meas_noise)

    rated = np.array([p.rated_flow for p in spec.pumps], float)
    flow = status * rated * (1.0 + spec.flow_noise * flow_eps)
    st_idx = {s.name: i for i, s in enumerate(spec.stations)}
    cols = [level[:total] + meas_noise]
    for j in range(n_pump):
        cols += [status[:, j:j + 1], flow[:, j:j + 1]]
    for i, s in enumerate(spec.stations):
        members = [j for j, p in enumerate(spec.pumps) if st_idx[p.station] == i]
        gain = np.zeros(total)
        for j in members:
            gain = np.maximum(gain, status[:, j] * spec.pumps[j].head_gain)
        p_in = s.inlet_head - s.elevation + spec.head_noise * head_eps[:, i, 0]
        p_out = s.inlet_head + gain - s.elevation + spec.head_noise * head_eps[:, i, 1]
        cols += [p_in[:, None], p_out[:, None]]
    values = np.hstack(cols)[W:]

    names = spec.channel_names()
    labels = np.full(hours, NORMAL, dtype=np.int8)
    for a in attacks:
        labels[a.start:a.end] = ATTACK
        if a.concealment == "none":
            continue
        for ch in a.channels:
            if ch not in names:
                raise ScenarioError(f"concealment names unknown channel {ch!r}")
            c = names.index(ch)
            if a.concealment == "replay":
                src = a.source_start
                if src < 0 or src + a.duration > hours:
                    raise ScenarioError("replay source window outside the simulated range")
                values[a.start:a.end, c] = values[src:src + a.duration, c]
            else:
                values[a.start:a.end, c] = values[a.start:a.end, c] + a.offset

    t0 = np.datetime64(spec.start, "s")
    stamps = t0 + np.arange(hours) * np.timedelta64(3600, "s")
    ds = ScadaDataset(stamps, names, values, labels)
    trace = SimulationTrace(level[W:], demand[W:], inflow[W:], status[W:], clamped[W:])
    return ds, trace


def simulate(spec: SynthNetworkSpec, hours: int, seed=None) -> ScadaDataset:
    return simulate_trace(spec, hours, (), seed)[0]


def inject_attacks(spec: SynthNetworkSpec, attacks, hours: int, seed=None) -> ScadaDataset:
    return simulate_trace(spec, hours, attacks, seed)[0]


def emit(ds: ScadaDataset, path, comments=()):
    """Write ``ds`` as CSV readable by :func:`scadavae.dataio.load_csv` (label column ``label``)."""
    if path is None or str(path) == "":
        raise ValueError("emit: empty output path")
    write_csv(ds, path, comments=comments)


# --------------------------------------------------------------------------
# network metadata for the rule baseline
# --------------------------------------------------------------------------

def network_meta(spec: SynthNetworkSpec, curve_exponent=2.0, shutoff_ratio=1.25) -> dict:
    """Rule-check metadata (JSON-ready) consistent with ``spec``.

    Pump curves ``a - b*Q**c`` are fitted through each pump's rated point
    with shutoff head ``a = shutoff_ratio * head_gain``.
    """
    tanks = [{
        "name": t.name, "level_channel": f"L_{t.name}",
        "diameter": 2.0 * math.sqrt(t.area / math.pi),
        "min_level": t.min_level, "max_level": t.max_level, "elevation": t.elevation,
    } for t in spec.tanks]
    stations, feeds, sensors = [], {}, {}
    for s in spec.stations:
        pumps = []
        for p in spec.pumps:
            if p.station != s.name:
                continue
            a = shutoff_ratio * p.head_gain
            b = (a - p.head_gain) / p.rated_flow ** curve_exponent
            pumps.append({"name": p.name, "status_channel": f"S_{p.name}",
                          "flow_channel": f"F_{p.name}", "curve": [a, b, curve_exponent]})
            feeds.setdefault(s.name, [])
            if p.tank not in feeds[s.name]:
                feeds[s.name].append(p.tank)
        stations.append({"name": s.name, "inlet_channel": f"P_{s.name}_in",
                         "outlet_channel": f"P_{s.name}_out", "pumps": pumps})
        sensors[f"P_{s.name}_in"] = s.elevation
        sensors[f"P_{s.name}_out"] = s.elevation
    rules = []
    for p in spec.pumps:
        rules.append({"actuator": f"S_{p.name}", "comparison": "below", "tank": p.tank,
                      "level": p.on_below, "expected_status": 1})
        rules.append({"actuator": f"S_{p.name}", "comparison": "above", "tank": p.tank,
                      "level": p.off_above, "expected_status": 0})
    # stations drawing from a common source with no pumping in between
    ordered = sorted(spec.stations, key=lambda s: -s.inlet_head)
    pairs = [{"upstream": f"P_{u.name}_in", "downstream": f"P_{d.name}_in"}
             for u, d in zip(ordered, ordered[1:])]
    return {
        "pressure_to_head": 1.0,
        "flow_to_volume": 1.0,
        "tanks": tanks,
        "pump_stations": stations,
        "control_rules": rules,
        "head_sensors": sensors,
        "head_pairs": pairs,
        "station_pump_map": feeds,
    }


# --------------------------------------------------------------------------
# scenario files
# --------------------------------------------------------------------------

@dataclass
class Scenario:
    network: SynthNetworkSpec
    train_hours: int
    attack_hours: int
    attacks: list
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        try:
            net = SynthNetworkSpec.from_dict(d["network"])
            attacks = [AttackSpec(**a) for a in d.get("attacks", [])]
            return cls(net, int(d["train_hours"]), int(d["attack_hours"]), attacks,
                       int(d.get("seed", net.seed)))
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"malformed scenario: {exc}") from None

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(d)

    def to_dict(self):
        return {"network": self.network.to_dict(), "train_hours": self.train_hours,
                "attack_hours": self.attack_hours,
                "attacks": [dataclasses.asdict(a) for a in self.attacks], "seed": self.seed}

    def generate(self) -> "ScenarioData":
        """Simulate the training period, the attack period and its no-attack twin.

        The attack run and its twin share a seed, so the two differ only
        through the attacks.
        """
        ss = np.random.SeedSequence(self.seed)
        s_train, s_attack = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
        train = simulate(self.network, self.train_hours, seed=s_train)
        shifted = dataclasses.replace(
            self.network, start=str(train.timestamps[-1] + np.timedelta64(3600, "s")))
        attack, trace = simulate_trace(shifted, self.attack_hours, self.attacks, seed=s_attack)
        baseline, base = simulate_trace(shifted, self.attack_hours, (), seed=s_attack)
        return ScenarioData(train, attack, trace, baseline, base)


class ScenarioData(NamedTuple):
    train: ScadaDataset
    attack: ScadaDataset
    attack_trace: SimulationTrace
    baseline: ScadaDataset
    baseline_trace: SimulationTrace


def default_scenario() -> Scenario:
    from importlib import resources
    text = resources.files("scadavae").joinpath("data/default_scenario.json").read_text()
    return Scenario.from_dict(json.loads(text))
