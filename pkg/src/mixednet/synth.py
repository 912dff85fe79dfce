"""Synthetic climbing sessions with a known mixed-effects ground truth.

Each participant climbs twice (lead and top rope).  A route is split into
four equal-duration intervals.  The EMG spectral centroid decays linearly
over the climb (fatigue) while its amplitude grows; heart rate rises with
the interval and is higher when leading.  The summed fear score of each
interval follows the linear mixed model

    total = intercept + style*lead + interval[i] + mnf*MNF + mnf_style*MNF*lead
            + experience*years + b_j + e

with ``b_j ~ N(0, sigma_b^2)`` and ``e ~ N(0, sigma_e^2)``, clipped to
[3, 30].  ``nonlinear=True`` adds ``A * tanh((MNF - pivot) / scale)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import signal as sps

from .errors import ConfigError
from .signal import (
    FEAR_ITEMS, FS_ACCEL, FS_ECG, FS_EMG, MANIFEST_COLUMNS, SCORE_COLUMNS, STYLES,
    RawRecording, build_feature_series, manifest_rows, recording_id, write_manifest,
    write_recording,
)

COEFFICIENTS = {
    "intercept": 10.0,
    "lead": 13.65,
    "interval2": 1.054,
    "interval3": 3.516,
    "interval4": 4.628,
    "mnf": -0.0008,
    "mnf_style": -0.089,
    "experience": -0.074,
}


@dataclass
class SynthConfig:
    n_participants: int = 19
    interval_seconds: float = 30.0
    sigma_b: float = 2.0
    sigma_e: float = 1.0
    coefficients: dict = field(default_factory=lambda: dict(COEFFICIENTS))
    nonlinear: bool = False
    nonlinear_amplitude: float = 4.0
    nonlinear_pivot: float = 118.0
    nonlinear_scale: float = 6.0
    # EMG centroid: participant baseline, decay (Hz over the whole climb)
    mnf_mean: float = 130.0
    mnf_sd: float = 10.0
    mnf_trial_sd: float = 3.0
    fatigue_decay: dict = field(default_factory=lambda: {"lead": 30.0, "toprope": 20.0})
    spectral_width: float = 35.0
    emg_amplitude: float = 0.1
    amplitude_growth: float = 0.5
    mains_amplitude: float = 0.02
    # ECG
    hr_mean: float = 90.0
    hr_sd: float = 8.0
    hr_lead_offset: float = 15.0
    hr_rise: float = 5.0
    rr_jitter: float = 0.02
    # IMU
    accel_noise: float = 0.2
    burst_rate: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.sigma_b < 0 or self.sigma_e < 0:
            raise ConfigError("standard deviations must be non-negative")
        if self.interval_seconds * 4 / 0.25 < 30:
            raise ConfigError("recording too short for a single 30-frame window")

    @property
    def duration(self) -> float:
        return 4 * self.interval_seconds

    def to_dict(self):
        return asdict(self)


def draw_participants(cfg: SynthConfig, rng) -> pd.DataFrame:
    J = cfg.n_participants
    return pd.DataFrame({
        "participant_id": np.arange(1, J + 1),
        "age": np.round(rng.uniform(23, 50, J), 1),
        "gender": rng.choice(["female", "male"], J),
        "experience_years": np.round(rng.uniform(1.5, 24, J), 1),
        "mnf_base": rng.normal(cfg.mnf_mean, cfg.mnf_sd, J),
        "hr_base": rng.normal(cfg.hr_mean, cfg.hr_sd, J),
        "b": rng.normal(0.0, cfg.sigma_b, J) if cfg.sigma_b > 0 else np.zeros(J),
    })


def mnf_trajectory(cfg, mnf_start, style, t):
    """True EMG spectral centroid (Hz) at climb times ``t``."""
    return mnf_start - cfg.fatigue_decay[style] * np.asarray(t) / cfg.duration


def interval_mnf(cfg, mnf_start, style):
    """Mean of the centroid trajectory over each of the four intervals."""
    mid = (np.arange(4) + 0.5) * cfg.interval_seconds
    return mnf_trajectory(cfg, mnf_start, style, mid)


def generate_targets(cfg: SynthConfig, style, mnf, experience, b, rng):
    """Per-interval scores for one climb.

    Parameters
    ----------
    style : str
    mnf : array of 4 interval MNF values
    experience : float
    b : float
        The participant's random intercept.

    Returns
    -------
    DataFrame with the four score columns plus ``total_fear`` (4 rows).
    """
    c = cfg.coefficients
    lead = 1.0 if style == "lead" else 0.0
    mnf = np.asarray(mnf, dtype=float)
    interval = np.array([0.0, c["interval2"], c["interval3"], c["interval4"]])
    total = (c["intercept"] + c["lead"] * lead + interval + c["mnf"] * mnf
             + c["mnf_style"] * mnf * lead + c["experience"] * experience + b)
    if cfg.nonlinear:
        total = total + cfg.nonlinear_amplitude * np.tanh(
            (mnf - cfg.nonlinear_pivot) / cfg.nonlinear_scale)
    if cfg.sigma_e > 0:
        total = total + rng.normal(0.0, cfg.sigma_e, 4)
    total = np.clip(total, 3.0, 30.0)
    items = split_items(total, rng)
    pump = np.clip(2.0 + 1.5 * np.arange(4) + 1.5 * lead + rng.normal(0, 1, 4), 1.0, 10.0)
    df = pd.DataFrame(items, columns=FEAR_ITEMS)
    df["pump"] = pump
    df["total_fear"] = df[FEAR_ITEMS].sum(axis=1)
    return df


def split_items(total, rng):
    """Split totals in [3, 30] into three items in [1, 10] around ``total / 3``."""
    total = np.asarray(total, dtype=float)
    base = total[:, None] / 3.0
    dev = rng.normal(0.0, 0.6, (total.size, 3))
    dev -= dev.mean(axis=1, keepdims=True)
    room = np.minimum(base - 1.0, 10.0 - base)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(np.abs(dev) > 0, room / np.abs(dev), np.inf).min(axis=1, keepdims=True)
    return base + dev * np.minimum(scale, 1.0)


def generate_interval_data(cfg: SynthConfig, rng=None, participants=None) -> pd.DataFrame:
    """Interval-level observations (2 styles x 4 intervals per participant).

    This skips signal simulation; ``mnf_mean`` is the true interval centroid
    and ``iemg_mean`` an amplitude-driven proxy with measurement noise.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    people = draw_participants(cfg, rng) if participants is None else participants
    rows = []
    for p in people.itertuples(index=False):
        for style in STYLES:
            start = p.mnf_base + rng.normal(0.0, cfg.mnf_trial_sd)
            mnf = interval_mnf(cfg, start, style)
            scores = generate_targets(cfg, style, mnf, p.experience_years, p.b, rng)
            growth = 1 + cfg.amplitude_growth * (np.arange(4) + 0.5) / 4
            iemg = cfg.emg_amplitude * growth * 1000 * np.sqrt(2 / np.pi) * (1 + rng.normal(0, 0.05, 4))
            for i in range(4):
                rows.append({
                    "participant_id": p.participant_id,
                    "style": 1 if style == "lead" else 0,
                    "interval": i + 1,
                    "experience_years": p.experience_years,
                    "mnf_mean": mnf[i],
                    "iemg_mean": iemg[i],
                    **scores.iloc[i].to_dict(),
                })
    return pd.DataFrame(rows)


# -- raw signals ---------------------------------------------------------------

def _synth_emg(cfg, mnf_start, style, n, rng):
    L, hop = 1000, 500
    n_seg = int(np.ceil(max(n - L, 0) / hop)) + 1
    total = (n_seg - 1) * hop + L
    starts = np.arange(n_seg) * hop
    centers = (starts + L / 2) / FS_EMG
    freqs = np.fft.rfftfreq(L, 1 / FS_EMG)
    c = mnf_trajectory(cfg, mnf_start, style, centers)
    shape = np.exp(-0.5 * ((freqs[None, :] - c[:, None]) / cfg.spectral_width) ** 2)
    shape[:, (freqs < 20) | (freqs > 450)] = 0.0
    seg = np.fft.irfft(np.fft.rfft(rng.standard_normal((n_seg, L)), axis=1) * shape, n=L, axis=1)
    seg /= seg.std(axis=1, keepdims=True)
    amp = cfg.emg_amplitude * (1 + cfg.amplitude_growth * np.minimum(centers / cfg.duration, 1))
    # sine window: squared windows of 50%-overlapping segments sum to one
    win = np.sin(np.pi * (np.arange(L) + 0.5) / L)
    out = np.zeros(total)
    for k in range(n_seg):
        out[starts[k]:starts[k] + L] += seg[k] * win * amp[k]
    t = np.arange(n) / FS_EMG
    mains = cfg.mains_amplitude * np.sin(2 * np.pi * 50.0 * t + rng.uniform(0, 2 * np.pi))
    return out[:n] + mains


def _synth_ecg(cfg, hr_start, style, n, rng):
    duration = n / FS_ECG
    lead = 1.0 if style == "lead" else 0.0
    beats = []
    t = rng.uniform(0.1, 0.6)
    while t < duration:
        beats.append(t)
        interval = min(int(t // cfg.interval_seconds), 3)
        hr = hr_start + lead * cfg.hr_lead_offset + cfg.hr_rise * interval
        t += 60.0 / hr + rng.normal(0.0, cfg.rr_jitter)
    train = np.zeros(n)
    idx = np.round(np.asarray(beats) * FS_ECG).astype(int)
    train[idx[idx < n]] = 1.0
    kt = np.arange(-0.1, 0.1, 1 / FS_ECG)
    kernel = np.exp(-0.5 * (kt / 0.012) ** 2)
    zero = int(round(0.1 * FS_ECG))
    ecg = np.convolve(train, kernel)[zero:zero + n]
    tt = np.arange(n) / FS_ECG
    wander = 0.2 * np.sin(2 * np.pi * 0.25 * tt + rng.uniform(0, 2 * np.pi))
    return ecg + wander + rng.normal(0.0, 0.02, n)


def _synth_accel(cfg, n, rng):
    sos = sps.butter(2, 2.0, btype="lowpass", fs=FS_ACCEL, output="sos")
    acc = cfg.accel_noise * sps.sosfiltfilt(sos, rng.standard_normal(n)) * 3.0
    n_bursts = rng.poisson(cfg.burst_rate * n / FS_ACCEL)
    width = int(0.3 * FS_ACCEL)
    bump = np.sin(np.pi * np.arange(width) / width)
    for s in rng.integers(0, max(n - width, 1), n_bursts):
        acc[s:s + width] += rng.choice([-1.0, 1.0]) * bump[: n - s]
    return acc


def generate_recording(cfg: SynthConfig, participant, style, rng, mnf_start=None) -> RawRecording:
    """Raw EMG/ECG/accelerometer capture for one climb.

    ``participant`` is a row of :func:`draw_participants` (mapping or
    namedtuple).  ``mnf_start`` defaults to the participant baseline.
    """
    p = participant if isinstance(participant, dict) else participant._asdict()
    duration = cfg.duration
    start = p["mnf_base"] if mnf_start is None else mnf_start
    n_emg = int(round(duration * FS_EMG))
    emg = _synth_emg(cfg, start, style, n_emg, rng)
    ecg = _synth_ecg(cfg, p["hr_base"], style, int(round(duration * FS_ECG)), rng)
    acc = _synth_accel(cfg, int(round(duration * FS_ACCEL)), rng)
    marks = cfg.interval_seconds * np.arange(1, 5)
    return RawRecording(
        emg, ecg, acc, int(p["participant_id"]), style, marks, "g",
        meta={"age": float(p["age"]), "gender": str(p["gender"]),
              "experience_years": float(p["experience_years"])},
    )


def generate_dataset(cfg: SynthConfig):
    """Participant table (with the true ``b``) and a lazy iterator of
    ``(recording, scores)`` over every participant and style."""
    rng = np.random.default_rng(cfg.seed)
    people = draw_participants(cfg, rng)

    def items():
        for p in people.itertuples(index=False):
            for style in STYLES:
                start = p.mnf_base + rng.normal(0.0, cfg.mnf_trial_sd)
                rec = generate_recording(cfg, p, style, rng, mnf_start=start)
                scores = generate_targets(cfg, style, interval_mnf(cfg, start, style),
                                          p.experience_years, p.b, rng)
                yield rec, scores

    return people, items()


def write_dataset(directory, cfg: SynthConfig) -> pd.DataFrame:
    """Write raw sensor CSVs, ``manifest.csv`` and ``truth.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    people, items = generate_dataset(cfg)
    rows = []
    for rec, scores in items:
        write_recording(directory, rec)
        rows += manifest_rows(rec, scores[SCORE_COLUMNS].to_numpy())
    people.to_csv(directory / "truth.csv", index=False)
    return write_manifest(directory, rows)


def feature_frames(cfg: SynthConfig):
    """Simulate and featurise every climb in memory.

    Returns ``(features, manifest, participants)`` where ``features`` maps
    recording id to its feature DataFrame.
    """
    people, items = generate_dataset(cfg)
    feats, rows = {}, []
    for rec, scores in items:
        feats[rec.recording_id] = build_feature_series(rec)
        rows += manifest_rows(rec, scores[SCORE_COLUMNS].to_numpy())
    return feats, pd.DataFrame(rows, columns=MANIFEST_COLUMNS), people


__all__ = [
    "COEFFICIENTS", "SynthConfig", "draw_participants", "generate_targets", "split_items",
    "generate_interval_data", "generate_recording", "generate_dataset", "write_dataset",
    "feature_frames", "interval_mnf", "mnf_trajectory", "recording_id",
]
