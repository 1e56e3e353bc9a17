import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scadavae import dataio as dio


def hourly(T, start="2020-01-01T00"):
    return np.datetime64(start, "s") + np.arange(T) * np.timedelta64(3600, "s")


def toy(T=5, C=2, labels=None):
    v = np.arange(T * C, dtype=float).reshape(T, C)
    return dio.ScadaDataset(hourly(T), [f"c{i}" for i in range(C)], v, labels)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_toy_file(tmp_path):
    p = write(tmp_path, "# provenance line\ntimestamp,a,b\n2020-01-01 00:00:00,1,2\n"
                        "2020-01-01 01:00:00,3,4\n2020-01-01 02:00:00,5,6.5\n")
    ds = dio.load_csv(p)
    assert len(ds) == 3 and ds.channel_names == ["a", "b"]
    assert ds.values[2].tolist() == [5.0, 6.5]
    assert ds.labels is None


def test_load_gap_names_both_timestamps(tmp_path):
    p = write(tmp_path, "timestamp,a\n2020-01-01 00:00:00,1\n2020-01-01 02:00:00,3\n")
    with pytest.raises(dio.TimestampGap, match="row 3.*2020-01-01T00:00:00.*2020-01-01T02:00:00"):
        dio.load_csv(p)


def test_load_errors_are_distinct(tmp_path):
    dup = write(tmp_path, "timestamp,a\n2020-01-01 00:00:00,1\n2020-01-01 00:00:00,3\n", "dup.csv")
    with pytest.raises(dio.DuplicateTimestamp, match="row 3"):
        dio.load_csv(dup)
    bad = write(tmp_path, "timestamp,a\n2020-01-01 00:00:00,x\n", "bad.csv")
    with pytest.raises(dio.BadValue, match="row 2.*'a'"):
        dio.load_csv(bad)
    with pytest.raises(dio.MissingColumn, match="'flag'"):
        dio.load_csv(bad, dio.ColumnMap(label="flag"))
    with pytest.raises(dio.MissingColumn, match="'zz'"):
        dio.load_csv(bad, dio.ColumnMap(channels=["zz"]))


def test_load_batadal_style_labels(tmp_path):
    p = write(tmp_path, "DATETIME,L_T1,ATT_FLAG\n06/01/14 00,1.5,-999\n06/01/14 01,1.6,1\n"
                        "06/01/14 02,1.7,0\n")
    ds = dio.load_csv(p, dio.BATADAL_COLUMNS)
    assert ds.labels.tolist() == [dio.UNLABELED, dio.ATTACK, dio.NORMAL]
    assert ds.timestamps[1] == np.datetime64("2014-01-06T01:00:00")


def test_csv_roundtrip(tmp_path):
    ds = toy(6, 3, labels=[0, 0, 1, 1, -1, 0])
    ds.values[1, 2] = 0.1 + 0.2  # repr round-trips exactly
    dio.write_csv(ds, tmp_path / "x.csv", comments=["seed 1"])
    back = dio.load_csv(tmp_path / "x.csv", dio.ColumnMap(label="label"))
    assert back.equals(ds)


def test_fit_stats_and_normalize():
    ds = dio.ScadaDataset(hourly(2), ["a", "b"], [[2.0, 7.0], [4.0, 7.0]])
    st_ = dio.fit_stats(ds)
    assert st_.mean.tolist() == [3.0, 7.0] and st_.std.tolist() == [1.0, 1e-6]
    assert dio.normalize(ds, st_).tolist() == [[-1.0, 0.0], [1.0, 0.0]]
    with pytest.raises(dio.DataError):
        dio.fit_stats(ds, slice(0, 0))


def test_normalized_moments(rng):
    v = rng.standard_normal((500, 4)) * [1, 10, 100, 0.01] + [5, -3, 1e3, 0]
    ds = dio.ScadaDataset(hourly(500), list("abcd"), v)
    z = dio.normalize(ds, dio.fit_stats(ds))
    assert np.abs(z.mean(axis=0)).max() < 1e-9
    assert np.abs(z.var(axis=0) - 1).max() < 1e-6


def test_window_examples():
    assert dio.window_count(8760, 24) == 8737
    ds = toy(24, 2)
    wb = dio.make_windows(ds)
    assert len(wb) == 1 and np.array_equal(wb.windows[0], ds.values.T)
    assert wb.end_timestamps[0] == ds.timestamps[-1]
    assert dio.window_labels([0, 0, 1, 0], 2).tolist() == [0, 1, 1]
    assert dio.window_labels([0, -1, 0, 1], 2).tolist() == [-1, -1, 1]
    with pytest.raises(dio.DataError):
        dio.make_windows(toy(5), 24)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 12), st.integers(1, 5))
def test_window_count_and_exact_slicing(T, W, stride):
    if T < W:
        assert dio.window_count(T, W, stride) == 0
        return
    ds = toy(T, 2)
    wb = dio.make_windows(ds, W, stride)
    assert len(wb) == (T - W) // stride + 1 == dio.window_count(T, W, stride)
    for n in range(len(wb)):
        assert np.array_equal(wb.windows[n], ds.values[n * stride:n * stride + W].T)
        assert wb.end_timestamps[n] == ds.timestamps[n * stride + W - 1]


def test_split_is_chronological_and_disjoint():
    ds = toy(100)
    a, b = dio.split(ds, 0.9, window_hours=2)
    assert (a.start, a.stop, b.start, b.stop) == (0, 90, 90, 100)
    tw = dio.make_windows(ds.slice(a), 2)
    hw = dio.make_windows(ds.slice(b), 2)
    assert tw.end_timestamps.max() < hw.end_timestamps.min() - np.timedelta64(3600, "s")
    with pytest.raises(dio.DataError):
        dio.split(ds, 0.9)  # 10 holdout rows < one 24-hour window
    with pytest.raises(ValueError):
        dio.split(ds, 1.0)


def test_dataset_invariants():
    with pytest.raises(dio.TimestampGap):
        dio.ScadaDataset(hourly(3)[[0, 1, 1]], ["a"], np.zeros((3, 1)))
    with pytest.raises(dio.DataError):
        dio.ScadaDataset(hourly(3), ["a", "b"], np.zeros((3, 1)))
    ds = toy(4, 3)
    assert ds.select(["c2", "c0"]).values[:, 0].tolist() == ds.channel("c2").tolist()
    with pytest.raises(dio.MissingColumn):
        ds.channel("nope")
