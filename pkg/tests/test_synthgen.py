import math
import warnings

import numpy as np
import pytest

from scadavae import dataio as dio
from scadavae import synthgen as sg


def one_tank(area=math.pi, demand=1.0, rated=2.0, on=0.5, off=9.0, initial=1.0, noise=False):
    return sg.SynthNetworkSpec(
        tanks=[sg.TankSpec("T", area, initial, 0.1, 9.5, height=10.0, demand_pattern=[demand] * 24)],
        stations=[sg.StationSpec("S", inlet_head=20.0)],
        pumps=[sg.PumpSpec("P", "T", "S", rated, 30.0, on, off)],
        demand_noise=0.02 if noise else 0.0, level_noise=0.01 if noise else 0.0,
        head_noise=0.0, flow_noise=0.0, warmup_hours=0)


def test_no_flux_keeps_level():
    spec = one_tank(demand=0.0)
    ds, tr = sg.simulate_trace(spec, 48, seed=1)
    assert (tr.level == 1.0).all() and (tr.status == 0).all()
    assert (ds.labels == dio.NORMAL).all()


def test_mass_balance_rise_per_hour():
    spec = one_tank(on=2.0)
    _, tr = sg.simulate_trace(spec, 24, seed=1)
    assert tr.status[0, 0] == 1.0
    assert tr.level[1, 0] - tr.level[0, 0] == pytest.approx(1 / math.pi, abs=1e-15)


def test_conservation_without_clamps():
    sc = sg.default_scenario()
    _, tr = sg.simulate_trace(sc.network, 500, seed=3)
    assert not tr.clamped.any()
    area = np.array([t.area for t in sc.network.tanks])
    stored = (tr.level[-1] - tr.level[0]) * area
    np.testing.assert_allclose(stored, tr.inflow.sum(0) - tr.demand.sum(0), atol=1e-9)


def test_default_levels_stay_in_band():
    sc = sg.default_scenario()
    ds = sg.simulate(sc.network, 2000, seed=11)
    for t in sc.network.tanks:
        lv = ds.channel(f"L_{t.name}")
        assert lv.min() >= t.min_level and lv.max() <= t.max_level


def test_determinism_and_zero_attacks():
    sc = sg.default_scenario()
    a = sg.simulate(sc.network, 100, seed=5)
    assert a.equals(sg.simulate(sc.network, 100, seed=5))
    assert a.equals(sg.inject_attacks(sc.network, [], 100, seed=5))
    assert not a.equals(sg.simulate(sc.network, 100, seed=6))


def test_overflow_attack_and_labels():
    sc = sg.default_scenario()
    attack = sg.AttackSpec(100, 72, "PU1", "off_above", 5.0)
    ds, tr = sg.simulate_trace(sc.network, 300, [attack], seed=2)
    assert np.flatnonzero(ds.labels).tolist() == list(range(100, 172))
    assert ds.channel("L_T1")[100:172].max() > 4.5
    assert ds.channel("L_T1")[:100].max() <= 4.5


def test_paired_run_diverges_then_reconverges():
    sc = sg.default_scenario()
    attack = sg.AttackSpec(100, 72, "PU1", "off_above", 4.3)
    _, tr = sg.simulate_trace(sc.network, 1000, [attack], seed=9)
    _, base = sg.simulate_trace(sc.network, 1000, [], seed=9)
    assert np.array_equal(tr.level[:101], base.level[:101])
    assert not np.array_equal(tr.level[101:173], base.level[101:173])
    np.testing.assert_allclose(tr.level[500:], base.level[500:], atol=1e-9)


def test_replay_concealment():
    sc = sg.default_scenario()
    attack = sg.AttackSpec(200, 48, "PU1", "off_above", 5.0, concealment="replay",
                           channels=["L_T1"], source_start=20)
    ds = sg.inject_attacks(sc.network, [attack], 300, seed=4)
    clean = sg.inject_attacks(sc.network, [sg.AttackSpec(200, 48, "PU1", "off_above", 5.0)], 300,
                              seed=4)
    assert np.array_equal(ds.channel("L_T1")[200:248], ds.channel("L_T1")[20:68])
    assert np.array_equal(ds.channel("F_PU1"), clean.channel("F_PU1"))
    base = sg.simulate(sc.network, 300, seed=4)
    assert not np.array_equal(ds.channel("F_PU1")[200:248], base.channel("F_PU1")[200:248])


def test_offset_concealment():
    sc = sg.default_scenario()
    a = sg.AttackSpec(50, 10, "PU1", "off_above", 5.0, concealment="offset", channels=["L_T1"],
                      offset=-0.5)
    ds = sg.inject_attacks(sc.network, [a], 100, seed=4)
    plain = sg.inject_attacks(sc.network, [sg.AttackSpec(50, 10, "PU1", "off_above", 5.0)], 100, seed=4)
    np.testing.assert_allclose(ds.channel("L_T1")[50:60], plain.channel("L_T1")[50:60] - 0.5)


def test_attack_validation():
    sc = sg.default_scenario()
    with pytest.raises(sg.ScenarioError):
        sg.simulate_trace(sc.network, 300, [sg.AttackSpec(10, 50, "PU1", "off_above", 5.0),
                                             sg.AttackSpec(40, 5, "PU1", "off_above", 4.6)])
    with pytest.raises(sg.ScenarioError):
        sg.simulate_trace(sc.network, 300, [sg.AttackSpec(10, 5, "PU1", "off_above", 4.0)])
    with pytest.raises(sg.ScenarioError):
        sg.AttackSpec(0, 0, "PU1", "off_above", 5.0)
    with pytest.warns(UserWarning, match="between attacks"):
        sg.simulate_trace(sc.network, 300, [sg.AttackSpec(10, 5, "PU1", "off_above", 5.0),
                                             sg.AttackSpec(20, 5, "PU2", "off_above", 4.0)])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        sg.simulate_trace(sc.network, 300, [sg.AttackSpec(10, 5, "PU1", "off_above", 5.0),
                                             sg.AttackSpec(100, 5, "PU2", "off_above", 4.0)])


def test_spec_validation():
    with pytest.raises(sg.ScenarioError):
        one_tank(initial=0.05)
    with pytest.raises(sg.ScenarioError):
        one_tank(rated=0.0)
    with pytest.raises(sg.ScenarioError):
        sg.SynthNetworkSpec.from_dict({"tanks": [], "stations": [], "pumps": [], "color": 1})


def test_emit_roundtrip(tmp_path):
    sc = sg.default_scenario()
    ds = sg.inject_attacks(sc.network, [sg.AttackSpec(30, 10, "PU3", "on_below", 1.5)], 80, seed=1)
    sg.emit(ds, tmp_path / "a.csv", ["seed 1"])
    header = [l for l in (tmp_path / "a.csv").read_text().splitlines() if not l.startswith("#")][0]
    assert header.split(",") == ["timestamp"] + ds.channel_names + ["label"]
    assert dio.load_csv(tmp_path / "a.csv", dio.ColumnMap(label="label")).equals(ds)
    with pytest.raises(ValueError):
        sg.emit(ds, "")
    with pytest.raises(OSError):
        sg.emit(ds, tmp_path / "missing_dir" / "a.csv")


def test_scenario_file_roundtrip(tmp_path):
    sc = sg.default_scenario()
    again = sg.Scenario.from_dict(sc.to_dict())
    assert again.to_dict() == sc.to_dict()
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(sg.ScenarioError):
        sg.Scenario.load(tmp_path / "bad.json")
    with pytest.raises(sg.ScenarioError):
        sg.Scenario.from_dict({"network": sc.network.to_dict()})


def test_default_scenario_shape():
    sc = sg.default_scenario()
    assert 6 <= len(sc.network.channel_names()) <= 12
    assert sc.train_hours == 90 * 24 and sc.attack_hours == 60 * 24
    assert [(a.start, a.duration) for a in sc.attacks] == [(240, 72), (610, 72), (960, 96)]
