import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import STEP, ts, write_corpus
from nowcast.constants import N_STATIONS, N_VARIABLES
from nowcast.data_pipeline import (
    PipelineError,
    PreprocessConfig,
    StationStats,
    align_station_records,
    build_manifest,
    collect_samples,
    crop_and_resize,
    denormalize_precip,
    floor_to_station_step,
    load_manifest,
    load_split,
    normalize_precip,
    preprocess,
    rain_fraction_filter,
    split_validation,
    standardize_station,
    validation_count,
)
from oracles import supersample_resize


# ------------------------------------------------------------ crop and resize


def test_constant_grid_stays_constant():
    out = crop_and_resize(np.full((300, 310), 2.5))
    assert out.shape == (64, 64)
    np.testing.assert_allclose(out, 2.5, atol=1e-12)


def test_zero_grid_stays_zero():
    assert not crop_and_resize(np.zeros((288, 288))).any()


@pytest.mark.parametrize("pixel, expected", [((0, 0), {(0, 0): 4 / 81}),
                                             ((4, 4), {(0, 0): 1 / 81, (0, 1): 1 / 81,
                                                       (1, 0): 1 / 81, (1, 1): 1 / 81}),
                                             ((4, 0), {(0, 0): 2 / 81, (1, 0): 2 / 81})])
def test_impulse_matches_supersampling_oracle(pixel, expected):
    raw = np.zeros((288, 288))
    raw[pixel] = 1.0
    out = crop_and_resize(raw)
    np.testing.assert_allclose(out, supersample_resize(raw), atol=1e-14)
    for cell, value in expected.items():
        assert out[cell] == pytest.approx(value, abs=1e-14)
    assert out.sum() == pytest.approx(1 / 4.5**2, abs=1e-14)


def test_random_grid_matches_oracle_and_centre_crop():
    raw = np.random.default_rng(3).gamma(0.5, 2.0, size=(290, 296))
    np.testing.assert_allclose(crop_and_resize(raw), supersample_resize(raw), atol=1e-12)


def test_crop_errors():
    with pytest.raises(PipelineError):
        crop_and_resize(np.zeros((287, 300)))
    bad = np.zeros((288, 288))
    bad[5, 5] = -0.1
    with pytest.raises(PipelineError):
        crop_and_resize(bad)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (288, 288), elements=st.floats(0, 40, allow_subnormal=False)))
def test_resize_mean_and_nonnegativity(raw):
    out = crop_and_resize(raw)
    assert out.min() >= 0
    assert out.mean() == pytest.approx(raw.mean(), rel=1e-9, abs=1e-12)


# --------------------------------------------------------------- normalization


@pytest.mark.parametrize("mm, expected", [(47.83, 1.0), (0.0, 0.0), (23.915, 0.5)])
def test_normalize_examples(mm, expected):
    assert normalize_precip(np.array([mm]))[0] == pytest.approx(expected, abs=1e-15)


def test_normalize_clamps_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        out = normalize_precip(np.array([50.0, 1.0]))
    assert out[0] == 1.0
    assert "clamped" in caplog.text


@given(arrays(np.float64, (8, 8), elements=st.floats(0, 47.83, allow_subnormal=False)))
def test_normalize_round_trip(grid):
    np.testing.assert_allclose(denormalize_precip(normalize_precip(grid)), grid, atol=1e-9)


# ---------------------------------------------------------------- rain filter


def _frac_grid(fraction):
    g = np.zeros((64, 64))
    g.flat[: int(round(fraction * 4096))] = 0.1
    return g


def test_filter_examples():
    assert rain_fraction_filter([_frac_grid(0.55), _frac_grid(0.49), _frac_grid(0.5)]).tolist() == [True, False, True]


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.floats(0, 1), st.floats(0, 1))
def test_filter_monotone(fractions, a, b):
    frames = [_frac_grid(f) for f in fractions]
    lo, hi = sorted((a, b))
    assert rain_fraction_filter(frames, hi).sum() <= rain_fraction_filter(frames, lo).sum()


def test_known_kept_count(tmp_path):
    # 30 frames -> 13 windows; window i is judged on frame i + 17
    cols = [40] * 17 + [34, 30, 64, 32, 0, 36, 20, 40, 32, 30, 44, 10, 64]
    write_corpus(tmp_path, {"2016-05-01 12:00": cols})
    samples, counts = collect_samples(tmp_path, PreprocessConfig())
    expected = sum(c / 64 >= 0.5 for c in cols[17:])
    assert counts["windows"] == 13
    assert counts["kept"] == len(samples) == expected == 8
    assert counts["dropped_rain_filter"] == 5


def test_last_input_filter_switch(tmp_path):
    cols = [0] * 17 + [64] * 6
    write_corpus(tmp_path, {"2016-05-01 12:00": cols})
    _, by_target = collect_samples(tmp_path, PreprocessConfig())
    _, by_input = collect_samples(tmp_path, PreprocessConfig(filter_frame="last_input"))
    assert by_target["kept"] == 6
    # last inputs are frames 11..16, all dry
    assert by_input["kept"] == 0


# ------------------------------------------------------------------ alignment


def test_floor_to_station_step():
    assert floor_to_station_step(ts("2016-05-01 12:05")) == ts("2016-05-01 12:00")
    assert floor_to_station_step(ts("2016-05-01 12:10")) == ts("2016-05-01 12:10")


def _series(times, value_of=lambda t: t):
    return {t: np.full((N_STATIONS, N_VARIABLES), float(value_of(t))) for t in times}


def test_duplication_rule():
    t0 = ts("2016-05-01 12:00")
    radar = [t0 + STEP * k for k in range(12)]
    series = _series(range(t0, t0 + 3600, 600))
    out = align_station_records(radar, series)
    assert out.shape == (N_STATIONS, N_VARIABLES, 12)
    assert out[0, 0, 0] == out[0, 0, 1] == t0
    assert out[0, 0, 2] == t0 + 600


def test_gap_excludes_covering_windows(tmp_path):
    cols = [64] * 40
    write_corpus(tmp_path, {"2016-05-01 12:00": cols}, skip_station_times=["2016-05-01 12:20"])
    samples, counts = collect_samples(tmp_path, PreprocessConfig())
    t0 = ts("2016-05-01 12:00")
    gap = {ts("2016-05-01 12:20"), ts("2016-05-01 12:25")}
    n_windows = 40 - 17
    affected = [i for i in range(n_windows) if gap & {t0 + STEP * (i + k) for k in range(12)}]
    assert counts["dropped_station_missing"] == len(affected) == 6
    assert counts["kept"] == n_windows - len(affected)
    kept_starts = {int(s.input_times[0]) for s in samples}
    assert not kept_starts & {t0 + STEP * i for i in affected}


def test_alignment_reconstruction(tiny_corpus):
    from nowcast.data_pipeline import load_station_observations

    series = load_station_observations(tiny_corpus / "stations" / "observations.csv")
    samples, _ = collect_samples(tiny_corpus, PreprocessConfig())
    for s in samples:
        for i, t in enumerate(s.input_times):
            np.testing.assert_array_equal(s.stations[:, :, i], series[floor_to_station_step(int(t))])


def test_bad_record_shape():
    t0 = ts("2016-05-01 12:00")
    with pytest.raises(PipelineError):
        align_station_records([t0], {t0: np.zeros((21, N_VARIABLES))})


def test_missing_value_drops():
    t0 = ts("2016-05-01 12:00")
    rec = np.zeros((N_STATIONS, N_VARIABLES))
    rec[3, 2] = np.nan
    assert align_station_records([t0], {t0: rec}) is None


# ------------------------------------------------------------ standardization


def test_standardize_examples():
    stats = StationStats(np.full(N_VARIABLES, 3.0), np.full(N_VARIABLES, 2.0))
    vals = np.zeros((1, N_VARIABLES, 1))
    vals[0, :, 0] = [3.0, 5.0, 7.0, 3, 3, 3, 3, 3]
    z = standardize_station(vals, stats)[0, :, 0]
    assert z[:3].tolist() == [0.0, 1.0, 2.0]


def test_zero_std_maps_to_zero(caplog):
    recs = [np.tile(np.arange(N_VARIABLES, dtype=float), (N_STATIONS, 1)) + k * np.eye(1, N_VARIABLES, 0)
            for k in range(3)]
    with caplog.at_level(logging.WARNING):
        stats = StationStats.fit(recs)
    assert "humidity" in stats.zero_std and "air_temperature" not in stats.zero_std
    z = standardize_station(recs[0][:, :, None], stats)
    assert np.all(z[:, 1:, :] == 0)
    assert np.all(np.isfinite(z))


# --------------------------------------------------------------------- splits


def test_validation_count_is_ten_percent():
    ids = [f"s{i:03d}" for i in range(100)]
    train, val = split_validation(ids, 0.1, seed=11)
    assert len(val) == 10 and len(train) == 90
    assert split_validation(ids, 0.1, seed=11) == (train, val)
    assert split_validation(ids, 0.1, seed=12)[1] != val
    assert set(train) | set(val) == set(ids)


@given(st.integers(1, 500), st.integers(0, 2**31))
def test_validation_count_property(n, seed):
    train, val = split_validation(list(range(n)), 0.1, seed)
    assert len(val) == validation_count(n) == int(n * 0.1 + 0.5)
    assert sorted(train + val) == list(range(n))


def test_manifest_split_purity_and_stats(tiny_corpus):
    cfg = PreprocessConfig(seed=7)
    samples, counts = collect_samples(tiny_corpus, cfg)
    m = build_manifest(samples, cfg, counts)
    seen = [i for ids in m.splits.values() for i in ids]
    assert len(seen) == len(set(seen))
    years = {k: {i[:4] for i in ids} for k, ids in m.splits.items()}
    assert years["test"] == {"2019"}
    assert years["train"] | years["validation"] <= {"2016", "2017", "2018"}
    # statistics come from training records only
    train_ids = set(m.splits["train"])
    recs = {}
    for s in samples:
        if s.sample_id in train_ids:
            for i, t in enumerate(s.input_times):
                recs[floor_to_station_step(int(t))] = s.stations[:, :, i]
    data = np.concatenate(list(recs.values()))
    np.testing.assert_allclose(m.stats.mean, data.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(m.stats.std, data.std(axis=0), rtol=1e-12)


def test_manifest_deterministic(tiny_corpus, tmp_path):
    a = preprocess(tiny_corpus, tmp_path / "a", PreprocessConfig(seed=3))
    b = preprocess(tiny_corpus, tmp_path / "b", PreprocessConfig(seed=3))
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    for split in ("train", "validation", "test"):
        assert (tmp_path / "a" / f"{split}.npz").read_bytes() == (tmp_path / "b" / f"{split}.npz").read_bytes()
    assert a.preprocess_hash == b.preprocess_hash
    loaded = load_manifest(tmp_path / "a" / "manifest.json")
    assert loaded.preprocess_hash == a.preprocess_hash and loaded.splits == a.splits
    arr = load_split(tmp_path / "a", "train")
    assert arr["inputs"].shape[1:] == (12, 64, 64) and arr["stations"].shape[1:] == (22, 8, 12)
    assert 0 <= arr["inputs"].min() and arr["inputs"].max() <= 1


def test_empty_split_is_an_error(tmp_path):
    write_corpus(tmp_path, {"2016-05-01 12:00": [64] * 30})
    cfg = PreprocessConfig()
    samples, counts = collect_samples(tmp_path, cfg)
    with pytest.raises(PipelineError, match="test split is empty"):
        build_manifest(samples, cfg, counts)


def test_manifest_json_is_readable(tiny_corpus, tmp_path):
    preprocess(tiny_corpus, tmp_path, PreprocessConfig(seed=7))
    d = json.loads((tmp_path / "manifest.json").read_text())
    assert set(d["sizes"]) == {"train", "validation", "test"}
    assert d["counts"]["kept"] == sum(d["sizes"].values())
