import logging
from datetime import date, timedelta

import numpy as np
import pytest

from precipxai.data import (
    DataValidationError,
    DatasetManifest,
    FeatureCube,
    PipelineConfig,
    SampleSet,
    SyntheticSpec,
    assemble_sequences,
    build_dataset,
    build_lag_features,
    build_precip_deltas,
    chronological_split,
    expm1_inverse,
    export_csv,
    generate_synthetic,
    ingest_csv,
    load_bundle,
    log1p_target,
    robust_fit,
    robust_transform,
    save_bundle,
)
from precipxai.training import compute_tau

from oracles import type7_quantile


def make_cube(values, names=None, start=date(2020, 6, 1)):
    values = np.asarray(values, dtype=float)
    names = names or [f"v{i}" for i in range(values.shape[-1])]
    dates = [start + timedelta(days=i) for i in range(values.shape[0])]
    return FeatureCube(values, names, dates)


def dyadic_cube(rng, days=12, h=3, w=2, names=("tp", "x0")):
    # multiples of 1/1024 in a small range keep sums and differences exact
    vals = rng.integers(0, 20 * 1024, size=(days, h, w, len(names))) / 1024.0
    return make_cube(vals, list(names))


def write_fixture(tmp_path, days=2, rows=1, cols=1, variables=("tp",), drop=None, dup=False):
    start = date(2020, 6, 1)
    m = DatasetManifest(rows, cols, list(variables), start, start + timedelta(days=days - 1),
                        city="test")
    (tmp_path / "m.txt").write_text(m.to_text(), encoding="utf-8")
    lines = ["date,row,col,variable,value"]
    rng = np.random.default_rng(0)
    for d in range(days):
        for r in range(rows):
            for c in range(cols):
                for v in variables:
                    iso = (start + timedelta(days=d)).isoformat()
                    if drop == (iso, r, c, v):
                        continue
                    lines.append(f"{iso},{r},{c},{v},{rng.gamma(2.0):.6f}")
    if dup:
        lines.append(lines[1])
    (tmp_path / "d.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return tmp_path / "m.txt", tmp_path / "d.csv"


# --- ingestion -----------------------------------------------------------------------

def test_ingest_minimal(tmp_path):
    m, cube = ingest_csv(*write_fixture(tmp_path))
    assert cube.values.shape == (2, 1, 1, 1)
    assert m.variables == ["tp"]


def test_ingest_missing_cell_names_coordinates(tmp_path):
    paths = write_fixture(tmp_path, days=3, rows=2, cols=2, drop=("2020-06-02", 1, 0, "tp"))
    with pytest.raises(DataValidationError, match=r"2020-06-02.*\(1,0\).*tp"):
        ingest_csv(*paths)


def test_ingest_duplicate_and_unknown(tmp_path):
    with pytest.raises(DataValidationError, match="duplicate"):
        ingest_csv(*write_fixture(tmp_path, dup=True))
    m, d = write_fixture(tmp_path)
    d.write_text(d.read_text() + "2020-06-01,0,0,zz,1.0\n")
    with pytest.raises(DataValidationError, match="unknown variable"):
        ingest_csv(m, d)


def test_csv_round_trip_bit_exact(tmp_path):
    m_path, d_path = write_fixture(tmp_path, days=30, rows=3, cols=3,
                                   variables=("tp", "t2m", "sp", "u10"))
    m, cube = ingest_csv(m_path, d_path)
    rng = np.random.default_rng(3)
    cube.values[:] = rng.normal(size=cube.values.shape) * 1e3
    export_csv(cube, tmp_path / "out.csv")
    _, again = ingest_csv(m_path, tmp_path / "out.csv")
    assert again.values.tobytes() == cube.values.tobytes()


def test_manifest_round_trip_and_unknown_keys():
    m = DatasetManifest(8, 8, ["tp", "x"], date(2001, 6, 1), date(2001, 9, 30), "Delhi",
                        months=(6, 7, 8, 9))
    assert DatasetManifest.from_text(m.to_text()) == m
    with pytest.raises(DataValidationError, match="unknown"):
        DatasetManifest.from_text(m.to_text() + "colour=red\n")
    with pytest.raises(DataValidationError, match="duplicate"):
        DatasetManifest(1, 1, ["a", "a"], date(2001, 1, 1), date(2001, 1, 2))


# --- lags and deltas -------------------------------------------------------------------

def test_lag_shift_definition():
    cube = make_cube(np.arange(1.0, 5.0).reshape(4, 1, 1, 1))
    lagged = build_lag_features(cube, lags=(1,))
    col = lagged.channel("v0_lag1")[:, 0, 0]
    assert np.isnan(col[0]) and col[1:].tolist() == [1.0, 2.0, 3.0]
    assert build_lag_features(cube, lags=(3,)).valid.sum() == 1
    with pytest.raises(DataValidationError):
        build_lag_features(make_cube(np.zeros((3, 1, 1, 1))), lags=(1, 2, 3))


def test_lagged_cells_match_original_exhaustively(rng):
    cube = make_cube(rng.normal(size=(10, 3, 4, 2)))
    lagged = build_lag_features(cube)
    for lag in (1, 2, 3):
        for v in cube.names:
            a, b = lagged.channel(f"{v}_lag{lag}"), cube.channel(v)
            for t in range(lag, 10):
                assert np.array_equal(a[t], b[t - lag])
    assert lagged.names[:2] == ["v0", "v1"]
    assert lagged.names[2:6] == ["v0_lag1", "v1_lag1", "v0_lag2", "v1_lag2"]


def test_lags_never_cross_season_gap():
    dates = [date(2020, 9, 29), date(2020, 9, 30), date(2021, 6, 1), date(2021, 6, 2)]
    cube = FeatureCube(np.arange(4.0).reshape(4, 1, 1, 1), ["tp"], dates)
    lagged = build_lag_features(cube, lags=(1,))
    assert lagged.valid.tolist() == [False, True, False, True]


def test_precip_delta_values():
    cube = make_cube(np.array([0.0, 2.0, 5.0]).reshape(3, 1, 1, 1), ["tp"])
    out = build_precip_deltas(build_lag_features(cube, lags=(1, 2)), "tp", lags=(1, 2))
    assert out.channel("tp_delta1")[2, 0, 0] == -3.0
    assert out.channel("tp_delta2")[2, 0, 0] == -2.0
    const = make_cube(np.full((6, 2, 2, 1), 4.2), ["tp"])
    deltas = build_precip_deltas(build_lag_features(const), "tp")
    for k in (1, 2, 3):
        assert np.all(deltas.channel(f"tp_delta{k}")[3:] == 0)
    with pytest.raises(DataValidationError, match="precipitation"):
        build_precip_deltas(build_lag_features(make_cube(np.zeros((5, 1, 1, 1)), ["x"])), "tp")


def test_delta_telescoping_and_reconstruction_exact(rng):
    for _ in range(20):
        out = build_precip_deltas(build_lag_features(dyadic_cube(rng)), "tp")
        v = out.valid
        P, P1, P2 = (out.channel(n)[v] for n in ("tp", "tp_lag1", "tp_lag2"))
        d1, d2 = out.channel("tp_delta1")[v], out.channel("tp_delta2")[v]
        assert np.array_equal(d1 + d2, P2 - P)
        assert np.array_equal(P1 - d1, P)


def test_delta_reconstruction_float_round_off(rng):
    out = build_precip_deltas(build_lag_features(make_cube(rng.gamma(2, size=(15, 3, 3, 1)), ["tp"])))
    v = out.valid
    P, P1, d1 = (out.channel(n)[v] for n in ("tp", "tp_lag1", "tp_delta1"))
    assert np.max(np.abs((P1 - d1) - P)) <= 4 * np.finfo(float).eps * np.max(np.abs(P1))


# --- sequencing --------------------------------------------------------------------------

def test_sequence_counts():
    for n in (8, 20):
        cube = make_cube(np.ones((n, 2, 2, 1)), ["tp"])
        assert len(assemble_sequences(cube, "tp", T=7)) == n - 7


def test_sequence_target_log_of_area_mean():
    vals = np.zeros((8, 2, 2, 1))
    vals[7] = 3.0
    s = assemble_sequences(make_cube(vals, ["tp"]), "tp", T=7)
    assert abs(s.y[0] - np.log(4.0)) < 1e-15 and abs(s.y[0] - 1.386294) < 1e-6
    assert s.X.shape == (1, 7, 2, 2, 1)


def test_too_few_days_warns(caplog):
    with caplog.at_level(logging.WARNING):
        s = assemble_sequences(make_cube(np.ones((7, 1, 1, 1)), ["tp"]), "tp", T=7)
    assert len(s) == 0 and "no admissible" in caplog.text


def test_every_target_day_exactly_once(rng):
    cube = build_lag_features(make_cube(rng.gamma(1, size=(40, 2, 2, 2)), ["tp", "x"]))
    s = assemble_sequences(cube, "tp", T=7)
    assert len(set(s.dates)) == len(s)
    valid_targets = [cube.dates[t + 1] for t in range(6 + 3, 39)]
    assert s.dates == valid_targets


def test_sequences_skip_season_gap():
    d1 = [date(2020, 6, 1) + timedelta(days=i) for i in range(10)]
    d2 = [date(2021, 6, 1) + timedelta(days=i) for i in range(10)]
    cube = FeatureCube(np.ones((20, 1, 1, 1)), ["tp"], d1 + d2)
    s = assemble_sequences(cube, "tp", T=7)
    assert len(s) == 6
    assert all(d.year == 2020 for d in s.dates[:3]) and all(d.year == 2021 for d in s.dates[3:])


# --- scaling and target transform ---------------------------------------------------------------

def test_robust_scaling_hand_example():
    x = np.array([1.0, 2.0, 3.0, 4.0, 100.0]).reshape(5, 1)
    p = robust_fit(x)
    assert p.median.tolist() == [3.0] and p.iqr.tolist() == [2.0]
    assert robust_transform(np.array([100.0]), p)[0] == 48.5
    assert type7_quantile([1, 2, 3, 4, 100], 0.75) == 4.0


def test_constant_channel_guard_and_median_zero(rng):
    x = np.concatenate([np.full((50, 1), 7.0), rng.normal(size=(50, 1))], axis=1)
    p = robust_fit(x)
    z = robust_transform(x, p)
    assert p.iqr[0] == 1.0 and np.all(z[:, 0] == 0)
    assert abs(np.median(z[:, 1])) < 1e-15


def test_log1p_pair():
    assert log1p_target(0.0) == 0.0
    assert abs(expm1_inverse(log1p_target(7.3)) - 7.3) < 1e-12
    mm, clamped = expm1_inverse(-0.01, return_clamped=True)
    assert mm == 0.0 and clamped
    with pytest.raises(DataValidationError):
        log1p_target(-1.0)


# --- splitting --------------------------------------------------------------------------

def dummy_samples(n):
    start = date(2000, 1, 1)
    return SampleSet(np.zeros((n, 1, 1, 1, 1)), np.arange(n, dtype=float),
                     [start + timedelta(days=i) for i in range(n)])


@pytest.mark.parametrize("n,sizes", [(100, (70, 15, 15)), (10, (7, 1, 2))])
def test_split_sizes(n, sizes):
    spec, parts = chronological_split(dummy_samples(n))
    assert tuple(len(p) for p in parts) == sizes
    assert max(parts[0].dates) < min(parts[1].dates) < min(parts[2].dates)
    assert (spec.train_end, spec.val_end) == (sizes[0], sizes[0] + sizes[1])


def test_split_rejects_tiny_and_unordered():
    with pytest.raises(DataValidationError):
        chronological_split(dummy_samples(2))
    s = dummy_samples(5)
    with pytest.raises(DataValidationError):
        chronological_split(s[[1, 0, 2, 3, 4]])


def test_no_leakage_from_val_and_test(rng):
    s = SampleSet(rng.normal(size=(60, 2, 2, 2, 3)), rng.gamma(1, size=60),
                  [date(2000, 1, 1) + timedelta(days=i) for i in range(60)])
    _, (train, val, test) = chronological_split(s)
    p1, tau1 = robust_fit(train), compute_tau(train.y)
    s.X[len(train):] += 1e6
    s.y[len(train):] *= 50
    _, (train2, _, _) = chronological_split(s)
    p2, tau2 = robust_fit(train2), compute_tau(train2.y)
    assert np.array_equal(p1.median, p2.median) and np.array_equal(p1.iqr, p2.iqr)
    assert tau1 == tau2


# --- synthetic generator and bundle ---------------------------------------------------------------

def test_synthetic_reproducible():
    spec = SyntheticSpec(grid_rows=4, grid_cols=4, n_days=60, seed=7)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a[1].values.tobytes() == b[1].values.tobytes()
    assert a[2] == b[2]


def test_synthetic_target_follows_planted_rule():
    spec = SyntheticSpec(grid_rows=6, grid_cols=6, n_days=400, lag=2, coeff=1.5,
                         noise_std=0.05 * 1.5, seed=3, mask="SE")
    _, cube, desc = generate_synthetic(spec)
    area = cube.channel("tp").mean(axis=(1, 2))
    driver = cube.channel("x0")[:, spec.mask_array()].mean(axis=1)
    # rain on day D follows the driver on day D - 1 - lag
    shift = 1 + spec.lag
    r = np.corrcoef(area[shift:], driver[:-shift])[0, 1]
    assert r > 0.9
    assert desc["n_clipped"] == 0 and np.all(cube.channel("tp") >= 0)


def test_synthetic_zero_coeff_is_pure_noise():
    spec = SyntheticSpec(grid_rows=4, grid_cols=4, n_days=500, coeff=0.0, noise_std=0.5, seed=1)
    _, cube, _ = generate_synthetic(spec)
    area = cube.channel("tp").mean(axis=(1, 2))
    assert abs(np.std(area) - 0.5) < 0.06
    driver = cube.channel("x0")[:, spec.mask_array()].mean(axis=1)
    assert abs(np.corrcoef(area[1:], driver[:-1])[0, 1]) < 0.15


@pytest.mark.parametrize("kw", [{"lag": 7}, {"driver": 4}, {"mask": "0:9"}])
def test_synthetic_rejects_invalid(kw):
    with pytest.raises(DataValidationError):
        generate_synthetic(SyntheticSpec(grid_rows=4, grid_cols=4, n_days=30, **kw))


def test_bundle_round_trip_and_index_map(tmp_path):
    spec = SyntheticSpec(grid_rows=4, grid_cols=4, n_days=80, seed=2)
    m, cube, desc = generate_synthetic(spec)
    ds = build_dataset(m, cube, PipelineConfig(), synthetic=desc)
    save_bundle(ds, tmp_path / "b.json")
    again = load_bundle(tmp_path / "b.json")
    assert again.feature_names == ds.feature_names
    assert again.synthetic == desc
    a, b = ds.scaled_samples(), again.scaled_samples()
    assert a.X.tobytes() == b.X.tobytes() and np.array_equal(a.y, b.y)
    save_bundle(again, tmp_path / "c.json")
    assert (tmp_path / "b.bin").read_bytes() == (tmp_path / "c.bin").read_bytes()
    # F = base + 3 * lagged + deltas
    assert len(ds.feature_names) == 5 + 3 * 5 + 3
