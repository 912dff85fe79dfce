"""Filtering and windowed feature extraction for EMG, ECG and IMU channels.

All sensors are brought onto one feature clock of 0.25 s: the EMG window
(1000 samples, overlap 500 at 2000 Hz) and the ECG window (250 samples,
overlap 125 at 500 Hz) both advance by 0.25 s, and the x-acceleration is
averaged over the 0.25 s frame around each row time.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import signal as sps

from .errors import ConfigError, ContractError, DimensionError
from .models import WINDOW_LENGTH, WindowBatch

log = logging.getLogger(__name__)

FS_EMG = 2000.0
FS_ECG = 500.0
FS_ACCEL = 50.0
FRAME_SECONDS = 0.25
EMG_WINDOW, EMG_OVERLAP = 1000, 500
ECG_WINDOW, ECG_OVERLAP = 250, 125
NOTCH_Q = 30.0
HRV_SPAN_SECONDS = 5.0
SD_FLOOR = 1e-8

STYLES = ("lead", "toprope")
FEATURE_COLUMNS = ["t_seconds", "mnf_hz", "iemg", "hr_bpm", "rmssd_ms", "accel_x"]
MODEL_FEATURES = ("mnf_hz", "hr_bpm", "accel_x")
SCORE_COLUMNS = ["anxiety", "fear_falling", "fear_heights", "pump"]
FEAR_ITEMS = ["anxiety", "fear_falling", "fear_heights"]
MANIFEST_COLUMNS = [
    "recording_id", "participant_id", "style", "age", "gender", "experience_years",
    "accel_unit", "interval", "t_end", *SCORE_COLUMNS,
]
SENSOR_COLUMNS = ["t_seconds", "channel", "value"]


# -- filters -----------------------------------------------------------------

def notch_filter(x, fs, f0=50.0, q=NOTCH_Q):
    """Zero-phase second-order IIR notch at ``f0``."""
    if fs <= 2 * f0:
        raise ConfigError(f"sampling rate {fs} Hz too low for a {f0} Hz notch")
    b, a = sps.iirnotch(f0, q, fs=fs)
    return sps.filtfilt(b, a, np.asarray(x, dtype=float))


def bandpass_filter(x, fs, lo, hi, order=4):
    """Zero-phase Butterworth band-pass (forward-backward second-order sections)."""
    if not 0 < lo < hi < fs / 2:
        raise ConfigError(f"band [{lo}, {hi}] Hz invalid for fs={fs} Hz")
    sos = sps.butter(order, [lo, hi], btype="bandpass", fs=fs, output="sos")
    return sps.sosfiltfilt(sos, np.asarray(x, dtype=float))


def highpass_filter(x, fs, cutoff, order=4):
    if not 0 < cutoff < fs / 2:
        raise ConfigError(f"cutoff {cutoff} Hz invalid for fs={fs} Hz")
    sos = sps.butter(order, cutoff, btype="highpass", fs=fs, output="sos")
    return sps.sosfiltfilt(sos, np.asarray(x, dtype=float))


# -- windows -----------------------------------------------------------------

def window_starts(n, size, overlap):
    if not 0 <= overlap < size:
        raise ConfigError(f"need 0 <= overlap < size, got size={size}, overlap={overlap}")
    if size > n:
        return np.zeros(0, dtype=int)
    return np.arange(0, n - size + 1, size - overlap)


def sliding_windows(x, size, overlap):
    """Windows of ``size`` samples advancing by ``size - overlap``.

    A trailing partial window is dropped; a signal shorter than ``size``
    yields an empty ``(0, size)`` array.
    """
    x = np.asarray(x, dtype=float)
    starts = window_starts(len(x), size, overlap)
    if starts.size == 0:
        return np.zeros((0, size))
    return np.lib.stride_tricks.sliding_window_view(x, size)[starts]


# -- EMG features ------------------------------------------------------------

def mean_frequency(window, fs):
    """Power-weighted mean frequency of a Hann-windowed periodogram.

    The DC bin is excluded.  Returns NaN for an all-zero window.
    """
    window = np.asarray(window, dtype=float)
    if window.shape[-1] < 64:
        raise ContractError(f"mean frequency needs at least 64 samples, got {window.shape[-1]}")
    freqs, power = sps.periodogram(window, fs, window="hann", detrend=False, axis=-1)
    freqs, power = freqs[1:], power[..., 1:]
    total = power.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mnf = (power * freqs).sum(axis=-1) / total
    if np.ndim(total) == 0:
        return float(mnf) if total > 0 else np.nan
    return np.where(total > 0, mnf, np.nan)


def integrated_emg(window):
    """Rectified sum of a window (last axis)."""
    return np.abs(np.asarray(window, dtype=float)).sum(axis=-1)


# -- ECG features ------------------------------------------------------------

def detect_r_peaks(ecg, fs=FS_ECG, k=4.0, refractory=0.25, baseline_seconds=2.0):
    """Indices of R-peaks above a rolling ``median + k * MAD`` threshold.

    Peaks closer than ``refractory`` seconds are thinned to the tallest.
    """
    x = np.asarray(ecg, dtype=float)
    if x.size < 3:
        return np.zeros(0, dtype=int)
    span = max(3, int(round(baseline_seconds * fs)) | 1)
    s = pd.Series(x)
    med = s.rolling(span, center=True, min_periods=1).median().to_numpy()
    mad = pd.Series(np.abs(x - med)).rolling(span, center=True, min_periods=1).median().to_numpy()
    threshold = med + k * 1.4826 * mad
    peaks, _ = sps.find_peaks(x, height=threshold, distance=max(1, int(round(refractory * fs))))
    return peaks[x[peaks] > threshold[peaks]]


def heart_rate(rr):
    """Mean heart rate in bpm from RR intervals in seconds (NaN if < 2)."""
    rr = np.asarray(rr, dtype=float)
    if rr.size < 2:
        return np.nan
    return float(60.0 / rr.mean())


def rmssd(rr):
    """Root mean square of successive RR differences, in ms (NaN if < 2)."""
    rr = np.asarray(rr, dtype=float)
    if rr.size < 2:
        return np.nan
    return float(np.sqrt(np.mean(np.diff(rr) ** 2)) * 1000.0)


# -- recordings --------------------------------------------------------------

@dataclass
class RawRecording:
    emg: np.ndarray
    ecg: np.ndarray
    accel_x: np.ndarray
    participant_id: int
    style: str
    interval_marks: np.ndarray
    accel_unit: str = "g"
    fs_emg: float = FS_EMG
    fs_ecg: float = FS_ECG
    fs_accel: float = FS_ACCEL
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.emg = np.asarray(self.emg, dtype=float)
        self.ecg = np.asarray(self.ecg, dtype=float)
        self.accel_x = np.asarray(self.accel_x, dtype=float)
        self.interval_marks = np.asarray(self.interval_marks, dtype=float)
        if self.style not in STYLES:
            raise ConfigError(f"style must be one of {STYLES}, got {self.style!r}")
        if self.interval_marks.shape != (4,) or np.any(np.diff(self.interval_marks) <= 0):
            raise ContractError(f"interval marks must be 4 increasing times: {self.interval_marks}")
        duration = self.emg.size / self.fs_emg
        for name, x, fs in (("ecg", self.ecg, self.fs_ecg), ("accel_x", self.accel_x, self.fs_accel)):
            if abs(x.size - duration * fs) > 1:
                raise DimensionError(
                    f"{name} has {x.size} samples, expected {duration * fs:.0f} for {duration:.2f} s"
                )

    @property
    def recording_id(self) -> str:
        return recording_id(self.participant_id, self.style)

    @property
    def duration(self) -> float:
        return self.emg.size / self.fs_emg


def recording_id(participant_id, style):
    return f"p{int(participant_id):02d}_{style}"


def _rr_features(peak_times, centers, span):
    """HR and RMSSD from RR intervals lying inside a span around each center."""
    hr = np.full(centers.shape, np.nan)
    hv = np.full(centers.shape, np.nan)
    if peak_times.size < 2:
        return hr, hv
    lo = np.searchsorted(peak_times, centers - span / 2, side="left")
    hi = np.searchsorted(peak_times, centers + span / 2, side="right")
    rr = np.diff(peak_times)
    for i, (a, b) in enumerate(zip(lo, hi)):
        seg = rr[a:b - 1] if b - a >= 2 else rr[:0]
        hr[i] = heart_rate(seg)
        hv[i] = rmssd(seg)
    return hr, hv


def build_feature_series(rec: RawRecording, hrv_span=HRV_SPAN_SECONDS, notch=True) -> pd.DataFrame:
    """Filter each channel and extract one feature row per 0.25 s frame.

    Undefined values (all-zero EMG window, too few beats, implausible heart
    rate) are left as NaN.
    """
    emg = rec.emg
    if notch:
        emg = notch_filter(emg, rec.fs_emg)
    emg = bandpass_filter(emg, rec.fs_emg, 20.0, 450.0, order=4)
    emg_w = sliding_windows(emg, EMG_WINDOW, EMG_OVERLAP)
    n_rows = emg_w.shape[0]

    ecg = bandpass_filter(rec.ecg, rec.fs_ecg, 1.0, 30.0, order=4)
    n_rows = min(n_rows, window_starts(ecg.size, ECG_WINDOW, ECG_OVERLAP).size)
    emg_w = emg_w[:n_rows]
    t = (np.arange(n_rows) * (EMG_WINDOW - EMG_OVERLAP) + EMG_WINDOW / 2) / rec.fs_emg

    peaks = detect_r_peaks(ecg, rec.fs_ecg)
    hr, hv = _rr_features(peaks / rec.fs_ecg, t, hrv_span)
    hr[(hr < 30) | (hr > 240)] = np.nan

    # the upper IMU band edge (25 Hz) equals Nyquist at 50 Hz, leaving a high-pass
    acc = highpass_filter(rec.accel_x, rec.fs_accel, 0.1, order=2)
    acc_t = np.arange(acc.size) / rec.fs_accel
    lo = np.searchsorted(acc_t, t - FRAME_SECONDS / 2, side="left")
    hi = np.searchsorted(acc_t, t + FRAME_SECONDS / 2, side="left")
    csum = np.concatenate([[0.0], np.cumsum(acc)])
    cnt = hi - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        acc_mean = np.where(cnt > 0, (csum[hi] - csum[lo]) / cnt, np.nan)

    if n_rows:
        mnf = mean_frequency(emg_w, rec.fs_emg)
    else:
        mnf = np.zeros(0)
    return pd.DataFrame({
        "t_seconds": t,
        "mnf_hz": mnf,
        "iemg": integrated_emg(emg_w),
        "hr_bpm": hr,
        "rmssd_ms": hv,
        "accel_x": acc_mean,
    }, columns=FEATURE_COLUMNS)


def assign_intervals(times, interval_ends):
    """Interval number 1..4 for each time, 0 when past the last mark."""
    ends = np.asarray(interval_ends, dtype=float)
    idx = np.searchsorted(ends, np.asarray(times, dtype=float), side="left") + 1
    idx[idx > len(ends)] = 0
    return idx


def make_windows(features: pd.DataFrame, interval_ends, interval_totals,
                 feature_names=MODEL_FEATURES, length=WINDOW_LENGTH):
    """Cut a feature series into non-overlapping windows with interval targets.

    Rows with any undefined selected feature are dropped first.  Each window
    takes the target of the interval containing its center time; windows
    whose interval has no score are dropped.

    Returns
    -------
    series : ndarray (W, length, F)
    targets : ndarray (W,)
    intervals : ndarray (W,)
    centers : ndarray (W,)
    """
    cols = list(feature_names)
    clean = features.dropna(subset=cols)
    dropped = len(features) - len(clean)
    if dropped:
        log.info("dropped %d of %d feature rows with undefined values", dropped, len(features))
    values = clean[cols].to_numpy(dtype=float)
    times = clean["t_seconds"].to_numpy(dtype=float)
    n_win = len(clean) // length
    F = len(cols)
    if n_win == 0:
        return np.zeros((0, length, F)), np.zeros(0), np.zeros(0, dtype=int), np.zeros(0)
    series = values[: n_win * length].reshape(n_win, length, F)
    tw = times[: n_win * length].reshape(n_win, length)
    centers = 0.5 * (tw[:, 0] + tw[:, -1])
    intervals = assign_intervals(centers, interval_ends)
    totals = np.asarray(interval_totals, dtype=float)
    targets = np.full(n_win, np.nan)
    ok = intervals > 0
    targets[ok] = totals[intervals[ok] - 1]
    keep = np.isfinite(targets)
    return series[keep], targets[keep], intervals[keep], centers[keep]


def make_window_batches(features, interval_ends, interval_totals, cluster_id, meta,
                        feature_names=MODEL_FEATURES, length=WINDOW_LENGTH) -> WindowBatch:
    """Windows of one recording as an (unstandardized) :class:`WindowBatch`."""
    series, targets, _, _ = make_windows(features, interval_ends, interval_totals,
                                         feature_names, length)
    meta = np.asarray(meta, dtype=float).reshape(1, -1)
    return WindowBatch(series, np.repeat(meta, len(targets), axis=0), targets,
                       np.full(len(targets), cluster_id), length)


@dataclass
class Standardizer:
    """Per-column mean/sd learned from training data, sd floored at 1e-8."""

    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, x, axis=None):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        return cls(flat.mean(axis=0), np.maximum(flat.std(axis=0), SD_FLOOR))

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.sd

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.sd + self.mean


# -- CSV interface -----------------------------------------------------------

def _write_sensor(path, x, fs, channel):
    t = np.arange(len(x)) / fs
    pd.DataFrame({"t_seconds": t, "channel": channel, "value": x}).to_csv(
        path, index=False, float_format="%.7g")


def _read_sensor(path):
    df = pd.read_csv(path)
    missing = set(SENSOR_COLUMNS) - set(df.columns)
    if missing:
        raise ContractError(f"{path}: missing columns {sorted(missing)}")
    t = df["t_seconds"].to_numpy()
    fs = 1.0 / np.median(np.diff(t)) if len(t) > 1 else 1.0
    return df["value"].to_numpy(dtype=float), float(np.round(fs, 6))


def manifest_rows(rec: RawRecording, scores, meta=None):
    """Manifest rows (one per interval) for a recording; ``scores`` is 4 x 4."""
    meta = {**rec.meta, **(meta or {})}
    rows = []
    for i in range(4):
        rows.append({
            "recording_id": rec.recording_id,
            "participant_id": rec.participant_id,
            "style": rec.style,
            "age": meta.get("age", np.nan),
            "gender": meta.get("gender", ""),
            "experience_years": meta.get("experience_years", np.nan),
            "accel_unit": rec.accel_unit,
            "interval": i + 1,
            "t_end": rec.interval_marks[i],
            **dict(zip(SCORE_COLUMNS, np.asarray(scores[i], dtype=float))),
        })
    return rows


def write_recording(directory, rec: RawRecording):
    raw = Path(directory) / "raw"
    raw.mkdir(parents=True, exist_ok=True)
    rid = rec.recording_id
    _write_sensor(raw / f"{rid}_emg.csv", rec.emg, rec.fs_emg, "emg")
    _write_sensor(raw / f"{rid}_ecg.csv", rec.ecg, rec.fs_ecg, "ecg")
    _write_sensor(raw / f"{rid}_accel.csv", rec.accel_x, rec.fs_accel, "accel_x")


def write_manifest(directory, rows):
    df = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    df.to_csv(Path(directory) / "manifest.csv", index=False)
    return df


def read_manifest(directory) -> pd.DataFrame:
    path = Path(directory) / "manifest.csv"
    if not path.exists():
        raise ContractError(f"no manifest.csv in {directory}")
    df = pd.read_csv(path)
    missing = set(MANIFEST_COLUMNS) - set(df.columns)
    if missing:
        raise ContractError(f"manifest missing columns {sorted(missing)}")
    df["gender"] = df["gender"].fillna("").astype(str)
    return df


def read_recording(directory, rid, manifest: pd.DataFrame) -> RawRecording:
    rows = manifest[manifest["recording_id"] == rid].sort_values("interval")
    if len(rows) != 4:
        raise ContractError(f"recording {rid} needs 4 manifest rows, found {len(rows)}")
    raw = Path(directory) / "raw"
    emg, fs_emg = _read_sensor(raw / f"{rid}_emg.csv")
    ecg, fs_ecg = _read_sensor(raw / f"{rid}_ecg.csv")
    acc, fs_acc = _read_sensor(raw / f"{rid}_accel.csv")
    first = rows.iloc[0]
    return RawRecording(
        emg, ecg, acc, int(first["participant_id"]), str(first["style"]),
        rows["t_end"].to_numpy(dtype=float), str(first["accel_unit"]),
        fs_emg, fs_ecg, fs_acc,
        meta={"age": float(first["age"]), "gender": str(first["gender"]),
              "experience_years": float(first["experience_years"])},
    )


def extract_features(directory, out_directory=None) -> dict:
    """Raw CSVs under ``directory/raw`` to feature CSVs under ``features/``."""
    manifest = read_manifest(directory)
    out = Path(out_directory or Path(directory) / "features")
    out.mkdir(parents=True, exist_ok=True)
    result = {}
    for rid in sorted(manifest["recording_id"].unique()):
        feats = build_feature_series(read_recording(directory, rid, manifest))
        feats.to_csv(out / f"{rid}.csv", index=False, float_format="%.10g")
        result[rid] = feats
    return result


def read_features(directory) -> dict:
    folder = Path(directory) / "features"
    result = {}
    for path in sorted(folder.glob("*.csv")):
        df = pd.read_csv(path)
        if list(df.columns) != FEATURE_COLUMNS:
            raise ContractError(f"{path}: columns {list(df.columns)} != {FEATURE_COLUMNS}")
        result[path.stem] = df
    if not result:
        raise ContractError(f"no feature CSVs in {folder}")
    return result
