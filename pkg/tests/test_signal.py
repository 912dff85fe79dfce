from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixednet.errors import ConfigError, ContractError, DimensionError
from mixednet.signal import (
    FEATURE_COLUMNS, RawRecording, Standardizer, bandpass_filter, build_feature_series,
    detect_r_peaks, extract_features, heart_rate, integrated_emg, make_window_batches,
    make_windows, manifest_rows, mean_frequency, notch_filter, read_features, read_manifest,
    read_recording, rmssd, sliding_windows, window_starts, write_manifest, write_recording,
)

GOLDEN = Path(__file__).parent / "golden"


def sine(freq, fs, seconds, amp=1.0):
    t = np.arange(int(fs * seconds)) / fs
    return amp * np.sin(2 * np.pi * freq * t)


def db(out, ref):
    return 20 * np.log10(np.sqrt(np.mean(out ** 2)) / np.sqrt(np.mean(ref ** 2)))


def impulse_train(rate_hz, seconds, fs=500, first=0.5):
    x = np.zeros(int(seconds * fs))
    idx = (np.arange(first, seconds, 1 / rate_hz) * fs).round().astype(int)
    x[idx] = 1.0
    return x, idx


# -- filters -------------------------------------------------------------------

def test_notch_attenuates_mains():
    x = sine(50, 2000, 5)
    assert db(notch_filter(x, 2000), x) <= -20


def test_notch_passes_dc_and_100hz():
    dc = np.full(4000, 3.0)
    assert abs(db(notch_filter(dc, 2000), dc)) < 0.1
    x = sine(100, 2000, 5)
    assert abs(db(notch_filter(x, 2000), x)) < 1


def test_notch_needs_fast_sampling():
    with pytest.raises(ConfigError):
        notch_filter(np.zeros(100), 100)


def test_bandpass_response():
    low = sine(5, 2000, 5)
    assert db(bandpass_filter(low, 2000, 20, 450), low) <= -20
    mid = sine(100, 2000, 5)
    assert abs(db(bandpass_filter(mid, 2000, 20, 450), mid)) < 1
    assert np.array_equal(bandpass_filter(np.zeros(500), 2000, 20, 450), np.zeros(500))
    assert len(bandpass_filter(mid, 2000, 20, 450)) == len(mid)


@pytest.mark.parametrize("band", [(0, 10), (30, 20), (20, 1000), (-1, 5)])
def test_bandpass_invalid_band(band):
    with pytest.raises(ConfigError):
        bandpass_filter(np.zeros(500), 2000, *band)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_filters_are_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 3000))
    for f in (lambda s: notch_filter(s, 2000), lambda s: bandpass_filter(s, 2000, 20, 450)):
        assert np.max(np.abs(f(a * x + b * y) - (a * f(x) + b * f(y)))) < 1e-9


# -- windows -------------------------------------------------------------------

def test_sliding_window_examples():
    x = np.arange(2000.0)
    w = sliding_windows(x, 1000, 500)
    assert w.shape == (3, 1000) and list(w[:, 0]) == [0, 500, 1000]
    tiles = sliding_windows(np.arange(10.0), 5, 0)
    assert np.array_equal(tiles.reshape(-1), np.arange(10.0))
    assert sliding_windows(np.arange(999.0), 1000, 0).shape == (0, 1000)


def test_window_overlap_must_be_smaller_than_size():
    with pytest.raises(ConfigError):
        window_starts(100, 10, 10)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 5000), st.integers(1, 600), st.data())
def test_window_count_formula(n, size, data):
    overlap = data.draw(st.integers(0, size - 1))
    starts = window_starts(n, size, overlap)
    enumerated = [s for s in range(0, n, size - overlap) if s + size <= n]
    assert list(starts) == enumerated
    expected = (n - size) // (size - overlap) + 1 if n >= size else 0
    assert len(starts) == expected


# -- EMG features ----------------------------------------------------------------

def test_mnf_of_sine():
    assert abs(mean_frequency(sine(100, 2000, 0.5), 2000) - 100) < 1


def test_mnf_of_two_equal_power_sines():
    x = sine(100, 2000, 0.5) + sine(300, 2000, 0.5)
    assert abs(mean_frequency(x, 2000) - 200) < 2


def test_mnf_of_band_limited_noise():
    rng = np.random.default_rng(0)
    x = bandpass_filter(rng.normal(size=20000), 2000, 20, 450)
    values = mean_frequency(sliding_windows(x, 1000, 500), 2000)
    assert np.all((values > 20) & (values < 450))


def test_mnf_undefined_and_too_short():
    assert np.isnan(mean_frequency(np.zeros(1000), 2000))
    with pytest.raises(ContractError):
        mean_frequency(np.ones(63), 2000)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(1e-3, 1e3))
def test_mnf_scale_invariance(seed, c):
    x = np.random.default_rng(seed).normal(size=1000)
    assert abs(mean_frequency(c * x, 2000) - mean_frequency(x, 2000)) < 1e-9


def test_iemg_cases():
    assert integrated_emg(np.zeros(100)) == 0
    assert integrated_emg(np.ones(1000)) == 1000
    assert integrated_emg(np.array([2.0, -2.0] * 5)) == 20


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-100, 100))
def test_iemg_homogeneous(seed, c):
    x = np.random.default_rng(seed).normal(size=200)
    assert np.isclose(integrated_emg(c * x), abs(c) * integrated_emg(x), rtol=1e-12, atol=1e-12)


# -- ECG features --------------------------------------------------------------------

def test_impulse_train_peaks():
    x, idx = impulse_train(1.0, 10.0)
    peaks = detect_r_peaks(x, 500)
    assert len(peaks) == 10
    assert np.all(np.abs(peaks - idx) <= 1)
    assert np.all(np.abs(np.diff(peaks) - 500) <= 1)


def test_flat_signal_has_no_peaks():
    assert detect_r_peaks(np.zeros(5000), 500).size == 0
    assert np.isnan(heart_rate(np.zeros(0))) and np.isnan(rmssd(np.array([0.8])))


def test_two_hz_train_gives_120_bpm():
    x, _ = impulse_train(2.0, 10.0)
    rr = np.diff(detect_r_peaks(x, 500)) / 500
    assert abs(heart_rate(rr) - 120) < 0.5


def test_hr_and_rmssd_hand_cases():
    assert heart_rate([0.5, 0.5]) == 120
    assert rmssd([0.5, 0.5]) == 0
    assert abs(rmssd([0.8, 0.81, 0.79]) - 15.81) < 0.01
    assert rmssd([0.7] * 6) == 0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.3, 1.5), min_size=3, max_size=20), st.floats(-100, 100))
def test_hrv_invariant_to_time_shift(rr, shift):
    peaks = np.cumsum(rr)
    shifted = np.diff(peaks + shift)
    base = np.diff(peaks)
    assert np.isclose(heart_rate(shifted), heart_rate(base), rtol=1e-9)
    assert np.isclose(rmssd(shifted), rmssd(base), rtol=1e-6, atol=1e-6)


# -- recordings and windows ---------------------------------------------------------

def tiny_recording(seconds=12.0, style="lead", pid=1, seed=0):
    rng = np.random.default_rng(seed)
    ecg, _ = impulse_train(1.25, seconds)
    emg = bandpass_filter(rng.normal(size=int(2000 * seconds)), 2000, 20, 450)
    marks = seconds * np.arange(1, 5) / 4
    return RawRecording(emg, ecg + 0.01 * rng.normal(size=ecg.size), rng.normal(size=int(50 * seconds)),
                        pid, style, marks, meta={"age": 30.0, "gender": "female", "experience_years": 4.0})


def test_recording_validation():
    rec = tiny_recording()
    with pytest.raises(ContractError):
        RawRecording(rec.emg, rec.ecg, rec.accel_x, 1, "lead", [1, 3, 2, 4])
    with pytest.raises(DimensionError):
        RawRecording(rec.emg, rec.ecg[:-10], rec.accel_x, 1, "lead", rec.interval_marks)
    with pytest.raises(ConfigError):
        RawRecording(rec.emg, rec.ecg, rec.accel_x, 1, "boulder", rec.interval_marks)


def test_feature_series_shape_and_ranges():
    feats = build_feature_series(tiny_recording())
    assert list(feats.columns) == FEATURE_COLUMNS
    assert len(feats) == 47  # (12 s * 2000 - 1000) // 500 + 1
    assert np.allclose(np.diff(feats["t_seconds"]), 0.25)
    mnf = feats["mnf_hz"].dropna()
    assert np.all((mnf > 0) & (mnf <= 1000))
    hr = feats["hr_bpm"].dropna()
    assert len(hr) > 30 and np.allclose(hr, 75, atol=1)
    assert np.all(feats["rmssd_ms"].dropna() >= 0)


def features_frame(n, t0=0.125):
    t = t0 + 0.25 * np.arange(n)
    return pd.DataFrame({"t_seconds": t, "mnf_hz": 100.0, "iemg": 1.0, "hr_bpm": 80.0,
                         "rmssd_ms": 20.0, "accel_x": np.sin(t)})


def test_windows_carry_interval_targets():
    feats = features_frame(480)
    ends = [30.0, 60.0, 90.0, 120.0]
    totals = [9.0, 12.0, 15.0, 18.0]
    series, targets, intervals, centers = make_windows(feats, ends, totals)
    assert series.shape == (16, 30, 3)
    assert np.array_equal(targets, np.array(totals)[intervals - 1])
    first = intervals == 1
    assert first.any() and np.all(targets[first] == 2 + 3 + 4)


def test_short_recording_gives_no_windows():
    series, targets, _, _ = make_windows(features_frame(29), [2, 4, 6, 8], [3, 3, 3, 3])
    assert series.shape == (0, 30, 3) and targets.size == 0


def test_undefined_rows_dropped_and_missing_scores_drop_windows():
    feats = features_frame(130)
    feats.loc[5:9, "hr_bpm"] = np.nan
    series, targets, intervals, _ = make_windows(feats, [10.0, 20.0, 30.0, 40.0], [5, np.nan, 7, 8])
    assert np.all(np.isfinite(series))
    # 125 clean rows -> 4 windows centred near 4.5, 12.5, 20.0, 27.5 s; two land in interval 2
    assert len(series) == 2 and np.all(np.isfinite(targets))
    assert list(intervals) == [1, 3]


def test_window_batch_builder():
    batch = make_window_batches(features_frame(120), [7.5, 15, 22.5, 30], [3, 4, 5, 6], 7, [0.5, 1.0])
    assert len(batch) == 4 and batch.n_meta == 2 and np.all(batch.cluster_ids == 7)


def test_standardizer_constant_features():
    x = np.full((4, 30, 2), 5.0)
    s = Standardizer.fit(x)
    assert np.all(s.sd == 1e-8)
    assert np.array_equal(s.transform(x), np.zeros_like(x))


def test_standardizer_round_trip():
    x = np.random.default_rng(1).normal(3, 2, size=(10, 30, 3))
    s = Standardizer.fit(x)
    z = s.transform(x)
    assert np.allclose(z.reshape(-1, 3).mean(axis=0), 0, atol=1e-12)
    assert np.allclose(s.inverse(z), x)


# -- CSV interface ------------------------------------------------------------------

def test_csv_round_trip_and_golden_headers(tmp_path):
    rec = tiny_recording()
    write_recording(tmp_path, rec)
    scores = np.tile([3.0, 4.0, 5.0, 6.0], (4, 1))
    write_manifest(tmp_path, manifest_rows(rec, scores))
    manifest = read_manifest(tmp_path)
    back = read_recording(tmp_path, rec.recording_id, manifest)
    assert back.fs_emg == 2000 and back.fs_ecg == 500 and back.fs_accel == 50
    assert np.allclose(back.emg, rec.emg, rtol=1e-6, atol=1e-9)
    assert np.array_equal(back.interval_marks, rec.interval_marks)
    assert back.meta["gender"] == "female"

    extract_features(tmp_path)
    feats = read_features(tmp_path)
    header = (tmp_path / "features" / f"{rec.recording_id}.csv").read_text().splitlines()[0]
    assert header == (GOLDEN / "feature_header.csv").read_text().strip()
    manifest_header = (tmp_path / "manifest.csv").read_text().splitlines()[0]
    assert manifest_header == (GOLDEN / "manifest_header.csv").read_text().strip()
    assert list(feats) == [rec.recording_id]


def test_bad_inputs_rejected(tmp_path):
    with pytest.raises(ContractError):
        read_manifest(tmp_path)
    (tmp_path / "features").mkdir()
    pd.DataFrame({"t": [0.0]}).to_csv(tmp_path / "features" / "x.csv", index=False)
    with pytest.raises(ContractError):
        read_features(tmp_path)
