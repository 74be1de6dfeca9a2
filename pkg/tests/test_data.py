import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capstraffic.data import (
    CADENCE,
    ScalingStats,
    SpeedMatrix,
    SyntheticProfile,
    build_datasets,
    default_boundary,
    drop_sparse_days,
    generate_synthetic,
    impute,
    load_csv,
    make_windows,
    parse_timestamp,
    save_csv,
    split_train_eval,
    window_count,
)
from capstraffic.errors import DataError, GeometryError
from capstraffic.tasks import TASKS, TaskSpec, parse_task

START = parse_timestamp("2016-01-01T00:00:00")


def matrix(values, start=START):
    values = np.asarray(values, dtype=float)
    ts = start + np.arange(len(values)) * CADENCE
    return SpeedMatrix(values, ts, [f"s{j}" for j in range(values.shape[1])])


def write(tmp_path, text):
    path = tmp_path / "d.csv"
    path.write_text(text)
    return path


# -- tasks


def test_named_tasks():
    assert [(t.L, t.M, t.N) for t in TASKS.values()] == [(1, 10, 20), (2, 10, 20), (1, 14, 50), (2, 14, 50)]
    assert TASKS["task2"].label_size == 40
    assert parse_task("task3") == TASKS["task3"]
    assert parse_task("2,10,20").same_geometry(TASKS["task2"])
    for bad in ("task9", "1,2", "0,10,20", "a,b,c"):
        with pytest.raises(ValueError):
            parse_task(bad)


# -- csv


def test_csv_one_missing_cell(tmp_path):
    path = write(tmp_path, "timestamp,a,b\n"
                 "2016-01-01T00:00:00,50,60\n"
                 "2016-01-01T00:15:00,,61\n"
                 "2016-01-01T00:30:00,52,62\n")
    m = load_csv(path)
    assert m.mask.sum() == 1 and m.mask[1, 0]
    assert m.sensor_ids == ["a", "b"]


def test_csv_out_of_order_names_line(tmp_path):
    path = write(tmp_path, "timestamp,a\n2016-01-01T00:15:00,1\n2016-01-01T00:00:00,2\n")
    with pytest.raises(DataError, match="line 3"):
        load_csv(path)


@pytest.mark.parametrize(
    "body,line",
    [
        ("2016-01-01T00:00:00,1,2\n", 2),  # ragged
        ("2016-01-01T00:00:00,-1\n", 2),  # negative
        ("2016-01-01T00:00:00,1\n2016-01-01T00:45:00,1\n", 3),  # gap
        ("2016-01-01T00:00:00,fast\n", 2),
        ("yesterday,1\n", 2),
    ],
)
def test_csv_errors_carry_line(tmp_path, body, line):
    with pytest.raises(DataError) as info:
        load_csv(write(tmp_path, "timestamp,a\n" + body))
    assert info.value.line == line and f"line {line}" in str(info.value)


def test_csv_round_trip(tmp_path):
    m = generate_synthetic(3, 1, seed=1, profile=SyntheticProfile(missing_rate=0.1))
    save_csv(m, tmp_path / "x.csv")
    back = load_csv(tmp_path / "x.csv")
    np.testing.assert_array_equal(back.mask, m.mask)
    np.testing.assert_allclose(back.values[~back.mask], m.values[~m.mask], atol=0.005 + 1e-9)
    np.testing.assert_array_equal(back.timestamps, m.timestamps)


def test_select_sensors_geometry():
    m = matrix(np.ones((4, 3)))
    assert m.select_sensors(2).values.shape == (4, 2)
    with pytest.raises(GeometryError):
        m.select_sensors(5)


# -- imputation


def test_impute_same_slot_mean():
    values = np.full((3 * 96, 1), 30.0)
    values[39, 0] = 10.0          # day 1 slot 39
    values[96 + 39, 0] = 20.0     # day 2
    values[192 + 39, 0] = np.nan  # day 3 missing
    out = impute(matrix(values))
    assert out.values[192 + 39, 0] == 15.0


def test_impute_no_missing_identity():
    m = matrix(np.random.default_rng(0).uniform(10, 80, size=(50, 3)))
    np.testing.assert_array_equal(impute(m).values, m.values)


def test_impute_falls_back_to_sensor_mean():
    values = np.full((2 * 96, 1), np.nan)
    values[:96, 0] = 42.0
    values[5, 0] = np.nan
    values[96 + 5, 0] = np.nan
    out = impute(matrix(values))
    assert out.values[5, 0] == 42.0 and out.values[96 + 5, 0] == 42.0


def test_impute_all_missing_column_errors():
    values = np.ones((4, 2))
    values[:, 1] = np.nan
    with pytest.raises(DataError):
        impute(matrix(values))


def test_drop_sparse_days_splits_blocks():
    values = np.ones((3 * 96, 2))
    values[96:96 + 60, :] = np.nan  # day 2 is 62.5 % missing
    blocks = drop_sparse_days(matrix(values))
    assert [len(b.values) for b in blocks] == [96, 96]
    assert blocks[1].timestamps[0] == START + 192 * CADENCE


# -- splitting and scaling


def test_split_boundaries():
    m = matrix(np.ones((96 * 4, 1)))
    train, held = split_train_eval(m, "2016-01-04T00:00:00")
    assert len(train.values) == 3 * 96 and len(held.values) == 96
    with pytest.raises(DataError):
        split_train_eval(m, "2016-01-01T00:00:00")
    with pytest.raises(DataError):
        split_train_eval(m, "2017-01-01T00:00:00")


def test_default_boundary_year():
    m = SpeedMatrix(np.ones((366 * 96, 1)),
                    parse_timestamp("2016-01-01T00:00:00") + np.arange(366 * 96) * CADENCE, ["a"])
    b = default_boundary(m)
    train, held = split_train_eval(m, b)
    assert abs(len(train.values) / len(m.values) - 0.75) < 0.01
    assert str(b).endswith("T00:00:00")


def test_degenerate_stats():
    with pytest.raises(DataError):
        ScalingStats(5.0, 5.0)
    with pytest.raises(DataError):
        ScalingStats.from_matrices(matrix(np.full((3, 2), 7.0)))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 50), st.floats(1, 150), st.lists(st.floats(0, 200), min_size=1, max_size=20))
def test_scale_round_trip(lo, span, values):
    stats = ScalingStats(lo, lo + span)
    x = np.array(values)
    assert np.max(np.abs(stats.unscale(stats.scale(x)) - x)) < 1e-12


# -- windows


def test_window_count_examples():
    assert window_count(12, TaskSpec(1, 10, 1)) == 2
    assert window_count(5, TaskSpec(1, 10, 1)) == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 12), st.integers(1, 4), st.integers(0, 40))
def test_window_count_sweep(L, M, N, extra):
    task = TaskSpec(L, M, N)
    rows = M + L + extra
    ds = make_windows(matrix(np.arange(rows * N, dtype=float).reshape(rows, N)), task, ScalingStats(0, 1))
    assert len(ds) == rows - M - L + 1 == window_count(rows, task)
    # label is the L rows right after the input, flattened row-major
    k = extra
    np.testing.assert_array_equal(ds.inputs[k], np.arange((k) * N, (k + M) * N).reshape(M, N))
    np.testing.assert_array_equal(ds.labels[k], np.arange((k + M) * N, (k + M + L) * N))


def test_windows_short_matrix_errors():
    with pytest.raises(DataError):
        make_windows(matrix(np.ones((5, 1))), TaskSpec(1, 10, 1), ScalingStats(0, 1))


def test_windows_do_not_span_blocks():
    a, b = matrix(np.zeros((12, 1))), matrix(np.ones((12, 1)), start=START + 100 * CADENCE)
    ds = make_windows([a, b], TaskSpec(1, 10, 1), ScalingStats(0, 1))
    assert len(ds) == 4
    for x, y in zip(ds.inputs, ds.labels):
        assert len(set(x.ravel()) | set(y)) == 1


def test_no_eval_leakage_into_stats():
    m = generate_synthetic(20, 8, seed=3)
    boundary = "2016-01-07T00:00:00"
    values = m.values.copy()
    cut = np.searchsorted(m.timestamps, parse_timestamp(boundary))
    values[cut:] *= 5  # eval period far faster than anything in training
    values[cut + 20, 2] = np.nan
    spiked = SpeedMatrix(values, m.timestamps, m.sensor_ids)
    train, held = build_datasets(spiked, TASKS["task1"], boundary)
    train_rows = m.values[:cut]
    assert train.stats == ScalingStats(float(train_rows.min()), float(train_rows.max()))
    assert held.labels.max() > 1.5  # eval values fall outside [0, 1], not rescaled
    # the eval gap was filled from training slots, not from eval neighbours
    slot = (cut + 20) % 96
    expected = np.mean(train_rows[slot::96, 2])
    row = np.flatnonzero(held.label_times == m.timestamps[cut + 20])[0]
    assert held.label_speeds[row, 2] == pytest.approx(expected, rel=1e-12)


def test_build_datasets_geometry_error():
    with pytest.raises(GeometryError):
        build_datasets(generate_synthetic(20, 3, seed=0), TASKS["task4"])


# -- synthetic


def test_synthetic_deterministic_and_shape():
    a = generate_synthetic(5, 2, seed=9)
    b = generate_synthetic(5, 2, seed=9)
    assert a.values.shape == (192, 5)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, generate_synthetic(5, 2, seed=10).values)
    assert np.all(a.values >= 0)


def test_synthetic_zero_noise_days_identical():
    m = generate_synthetic(4, 3, seed=2, profile=SyntheticProfile(noise=0.0))
    days = m.values.reshape(3, 96, 4)
    np.testing.assert_array_equal(days[0], days[1])
    np.testing.assert_array_equal(days[0], days[2])
