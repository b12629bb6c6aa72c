import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treedrnet.data import (
    DataError,
    Scaler,
    SplitSpec,
    TimeSeriesDataset,
    chrono_split,
    fit_apply_scaler,
    load_csv,
    make_context_windows,
    make_covariate_windows,
    make_windows,
    prepare_windows,
    synth_dataset,
)


def series(values, name="s"):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    return TimeSeriesDataset(name, values, [f"c{k}" for k in range(values.shape[1])])


# -- csv --------------------------------------------------------------------


def test_load_small_numeric_csv(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("a,b\n1,2\n3,4\n5,6\n")
    ds = load_csv(p)
    assert ds.values.shape == (3, 2)
    assert ds.feature_names == ["a", "b"]
    np.testing.assert_array_equal(ds.values[:, 1], [2, 4, 6])


def test_bad_cell_reports_line_and_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n3,oops\n")
    with pytest.raises(DataError, match=r"line 3.*'b'"):
        load_csv(p)


def test_date_column_is_kept_as_timestamps(tmp_path):
    p = tmp_path / "ett.csv"
    rows = ["date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT"]
    for h in range(5):
        rows.append(f"2016-07-01 0{h}:00:00," + ",".join(str(h + k / 10) for k in range(7)))
    p.write_text("\n".join(rows) + "\n")
    ds = load_csv(p, date_column="date")
    assert ds.values.shape == (5, 7)
    assert ds.feature_names[-1] == "OT"
    assert list(ds.timestamps)[0] == "2016-07-01 00:00:00"


def test_missing_file_and_ragged_row(tmp_path):
    with pytest.raises(DataError, match="cannot open"):
        load_csv(tmp_path / "nope.csv")
    p = tmp_path / "r.csv"
    p.write_text("a,b\n1,2\n3\n")
    with pytest.raises(DataError, match="line 3"):
        load_csv(p)


# -- split ------------------------------------------------------------------


@pytest.mark.parametrize("n, sizes", [(100, (70, 10, 20)), (10, (7, 1, 2)), (101, (70, 10, 21))])
def test_split_sizes(n, sizes):
    parts = chrono_split(series(np.arange(n)))
    assert tuple(len(p) for p in parts) == sizes


@given(st.integers(10, 5000))
def test_split_is_a_chronological_partition(n):
    tr, va, te = chrono_split(series(np.arange(n)))
    joined = np.concatenate([tr.values, va.values, te.values])[:, 0]
    np.testing.assert_array_equal(joined, np.arange(n))
    assert len(tr) == int(0.7 * n + 1e-9)


def test_split_rejects_short_series():
    with pytest.raises(DataError, match="too short"):
        chrono_split(series(np.arange(9)))


def test_split_fractions_must_sum_to_one():
    with pytest.raises(DataError):
        SplitSpec(0.7, 0.2, 0.2)


# -- scaling ----------------------------------------------------------------


def test_scaler_two_points():
    sc = Scaler.fit(np.array([[0.0], [2.0]]))
    np.testing.assert_array_equal(sc.transform([[0.0], [2.0]]), [[-1.0], [1.0]])


def test_constant_column_is_centered_and_flagged():
    sc = Scaler.fit(np.array([[5.0, 1.0], [5.0, 3.0]]))
    assert sc.constant.tolist() == [True, False]
    np.testing.assert_array_equal(sc.transform([[5.0, 1.0]])[:, 0], [0.0])


def test_scaler_round_trip():
    rng = np.random.default_rng(0)
    v = rng.normal(3.0, 7.0, size=(200, 4))
    sc = Scaler.fit(v)
    np.testing.assert_allclose(sc.inverse(sc.transform(v)), v, rtol=0, atol=1e-12 * np.abs(v).max())


def test_scaler_statistics_come_from_train_only():
    values = np.concatenate([np.zeros(70), np.full(30, 1e6)])
    values[:70] = np.random.default_rng(1).normal(size=70)
    tr, va, te = chrono_split(series(values))
    (_, _, _), sc = fit_apply_scaler(tr, va, te)
    assert sc.mean[0] == pytest.approx(values[:70].mean())
    assert sc.std[0] == pytest.approx(values[:70].std())
    # moving the test split does not change the fitted statistics
    values2 = values.copy()
    values2[80:] = -5.0
    _, sc2 = fit_apply_scaler(*chrono_split(series(values2)))
    assert sc2.mean.tobytes() == sc.mean.tobytes()


def test_inverse_by_channel():
    sc = Scaler(np.array([1.0, 10.0]), np.array([2.0, 5.0]), np.zeros(2, bool))
    np.testing.assert_array_equal(sc.inverse(np.ones((2, 3)), channels=[1, 0]), [[15, 15, 15], [3, 3, 3]])


# -- windows ----------------------------------------------------------------


def test_window_counts():
    assert len(make_windows(series(np.arange(10)), 4, 2)) == 5
    assert len(make_windows(series(np.arange(6)), 4, 2)) == 1
    assert len(make_windows(series(np.arange(20).reshape(10, 2)), 4, 2)) == 10


def test_window_contents():
    w = make_windows(series(np.arange(10)), 4, 2)
    s = w[2]
    np.testing.assert_array_equal(s.input, [2, 3, 4, 5])
    np.testing.assert_array_equal(s.target, [6, 7])
    assert (s.origin, s.channel) == (2, 0)


def test_window_too_short_series():
    with pytest.raises(DataError, match="input_len \\+ output_len"):
        make_windows(series(np.arange(5)), 4, 2)


def test_windows_never_straddle_splits():
    n, I, O = 300, 12, 6
    prep = prepare_windows(series(np.arange(n, dtype=float)), I, O, scale=False)
    a, b = prep.boundaries
    for ws, lo, hi in ((prep.train, 0, a), (prep.val, a, b), (prep.test, b, n)):
        raw = np.concatenate([ws.inputs, ws.targets], axis=1)
        assert raw.min() >= lo and raw.max() < hi
    assert len(prep.train) == a - I - O + 1


def test_windows_reconstruct_the_series():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(40, 3))
    w = make_windows(series(v), 5, 3)
    for s in w:
        np.testing.assert_array_equal(np.concatenate([s.input, s.target]), v[s.origin:s.origin + 8, s.channel])


def test_covariate_windows_align_with_target():
    v = np.arange(60.0).reshape(20, 3)
    w = make_covariate_windows(series(v), "c1", 4, 2)
    assert w.covariates.shape == (15, 4, 2)
    np.testing.assert_array_equal(w.inputs[3], v[3:7, 1])
    np.testing.assert_array_equal(w.covariates[3], v[3:7][:, [0, 2]])


def test_context_windows_share_targets_across_input_lengths():
    v = np.arange(200.0)
    short = make_context_windows(v, 8, 4, 150, 200)
    long = make_context_windows(v, 32, 4, 150, 200)
    np.testing.assert_array_equal(short.targets, long.targets)
    assert short.targets.min() == 150
    with pytest.raises(DataError):
        make_context_windows(v, 200, 4, 150)


# -- synthetic data ---------------------------------------------------------


def test_noiseless_seasonal_has_period_24():
    ds = synth_dataset("seasonal", 500, dim=3, noise_std=0.0, seed=4)
    assert ds.meta["period"] == 24
    np.testing.assert_array_equal(ds.values[:-24], ds.values[24:])


@pytest.mark.parametrize("kind", ["seasonal", "trend_seasonal", "random_walk"])
def test_synthetic_is_deterministic(kind):
    a = synth_dataset(kind, 300, dim=2, seed=7)
    b = synth_dataset(kind, 300, dim=2, seed=7)
    assert a.values.tobytes() == b.values.tobytes()
    assert synth_dataset(kind, 300, dim=2, seed=8).values.tobytes() != a.values.tobytes()


def test_random_walk_is_cumulative_normal_stream():
    ds = synth_dataset("random_walk", 100, dim=1, noise_std=0.3, seed=2)
    steps = np.random.default_rng(2).normal(0.0, 0.3, size=(100, 1))
    np.testing.assert_allclose(ds.values, np.cumsum(steps, axis=0), atol=1e-12)


def test_unknown_synthetic_kind():
    with pytest.raises(DataError, match="unknown synthetic kind"):
        synth_dataset("sawtooth", 10)


@settings(max_examples=25, deadline=None)
@given(st.integers(12, 80), st.integers(1, 5), st.integers(1, 5), st.integers(1, 3))
def test_window_count_formula(n, I, O, d):
    ds = series(np.zeros((n, d)))
    if n < I + O:
        with pytest.raises(DataError):
            make_windows(ds, I, O)
    else:
        assert len(make_windows(ds, I, O)) == d * (n - I - O + 1)
