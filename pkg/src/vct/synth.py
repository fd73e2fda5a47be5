"""Synthetic synchronized ECG/PPG pairs with a planted cross-view lag.

The ECG is a train of narrow Gaussian R spikes with small P and T bumps.
The PPG is an asymmetric pulse whose maximum trails each R spike by
``ptt_lag`` seconds.  The first in-window R spike falls at a uniform offset
in [0, RR - lag_ceiling), so the first PPG peak always belongs to the first
R spike.  Beat phase is otherwise random, so neither view on its own pins
down the lag; the regression label is an affine function of the lag only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

AF_CV_THRESHOLD = 0.12

# ECG morphology: (offset from R in s, amplitude, width in s)
_P_WAVE = (-0.20, 0.06, 0.020)
_T_WAVE = (0.30, 0.10, 0.030)
_R_WIDTH = 0.008

# PPG pulse: rise and decay widths of the systolic bump, plus dicrotic shoulder
_PPG_RISE = 0.08
_PPG_DECAY = 0.10
_DICROTIC = (0.30, 0.30, 0.05)


@dataclass(frozen=True)
class SynthConfig:
    sample_rate: float = 50.0
    duration: float = 4.0
    heart_rate_mean: float = 75.0
    rr_jitter: float = 0.0
    ptt_lag: float = 0.2
    noise_std: float = 0.0
    baseline_wander_amp: float = 0.0
    seed: int = 0
    patch_len: int = 10
    # per-sample variability used by generate_dataset
    ptt_lag_range: tuple[float, float] | None = None
    rr_jitter_choices: tuple[float, ...] | None = None
    heart_rate_spread: float = 0.0
    # largest lag the phase draw must leave room for (defaults to ptt_lag)
    lag_ceiling: float | None = None
    # planted label map: label_reg = reg_intercept + reg_slope * ptt_lag
    reg_intercept: float = 100.0
    reg_slope: float = -50.0

    @property
    def phase_ceiling(self) -> float:
        if self.lag_ceiling is not None:
            return self.lag_ceiling
        return self.ptt_lag_range[1] if self.ptt_lag_range else self.ptt_lag

    @property
    def n_samples(self) -> int:
        return int(round(self.sample_rate * self.duration))

    def validate(self) -> None:
        w = self.sample_rate * self.duration
        if abs(w - round(w)) > 1e-9 or round(w) <= 0:
            raise ValueError(f"sample_rate*duration = {w} is not a positive integer")
        if self.patch_len <= 0 or int(round(w)) % self.patch_len:
            raise ValueError(f"window length {int(round(w))} not divisible by patch_len {self.patch_len}")
        jitters = self.rr_jitter_choices or (self.rr_jitter,)
        for j in jitters:
            if not 0.0 <= j < 0.5:
                raise ValueError(f"rr_jitter {j} outside [0, 0.5)")
        if self.heart_rate_mean <= 0:
            raise ValueError("heart_rate_mean must be positive")
        if not 0.0 <= self.heart_rate_spread < 0.5:
            raise ValueError("heart_rate_spread must lie in [0, 0.5)")
        rr_mean = 60.0 / (self.heart_rate_mean * (1.0 + self.heart_rate_spread))
        lags = self.ptt_lag_range or (self.ptt_lag, self.ptt_lag)
        if lags[0] > lags[1]:
            raise ValueError(f"ptt_lag_range {lags} is not ordered")
        for lag in lags:
            if not 0.0 < lag < rr_mean:
                raise ValueError(f"ptt_lag {lag} outside (0, {rr_mean:.3f}) s")
        ceiling = self.phase_ceiling
        if not lags[1] <= ceiling < rr_mean:
            raise ValueError(f"lag_ceiling {ceiling} must lie in [{lags[1]}, {rr_mean:.3f})")
        if self.noise_std < 0 or self.baseline_wander_amp < 0:
            raise ValueError("noise_std and baseline_wander_amp must be non-negative")


@dataclass
class SignalPair:
    ecg: np.ndarray
    ppg: np.ndarray
    ecg_present: bool = True
    ppg_present: bool = True
    label_reg: float = 0.0
    label_cls: int = 0
    ptt_lag: float = float("nan")
    rr_jitter: float = float("nan")

    def __post_init__(self):
        self.ecg = np.asarray(self.ecg, dtype=np.float64)
        self.ppg = np.asarray(self.ppg, dtype=np.float64)
        if self.ecg.shape != self.ppg.shape or self.ecg.ndim != 1:
            raise ValueError(f"ecg {self.ecg.shape} and ppg {self.ppg.shape} must be equal-length 1-D arrays")


def planted_label(cfg: SynthConfig, lag: float) -> float:
    return cfg.reg_intercept + cfg.reg_slope * lag


def _gauss(t: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((t - center) / width) ** 2)


def ppg_pulse(t: np.ndarray) -> np.ndarray:
    """Unit-peak pulse with its maximum exactly at t=0."""
    rise = np.exp(-0.5 * (t / _PPG_RISE) ** 2)
    decay = np.exp(-0.5 * (t / _PPG_DECAY) ** 2)
    main = np.where(t < 0, rise, decay)
    off, amp, width = _DICROTIC
    return main + amp * _gauss(t, off, width)


def _next_rr(rng: np.random.Generator, rr_mean: float, jitter: float) -> float:
    rr = rr_mean * (1.0 + jitter * rng.standard_normal()) if jitter > 0 else rr_mean
    return float(np.clip(rr, 0.5 * rr_mean, 1.5 * rr_mean))


def _beat_times(
    rng: np.random.Generator, duration: float, rr_mean: float, jitter: float, ceiling: float
) -> np.ndarray:
    first = rng.uniform() * (rr_mean - ceiling)
    # one beat before the window so its PPG tail and T wave reach the left edge
    times = [first - _next_rr(rng, rr_mean, jitter), first]
    while times[-1] < duration + rr_mean:
        times.append(times[-1] + _next_rr(rng, rr_mean, jitter))
    return np.asarray(times)


def in_window_peaks(r_times: np.ndarray, fs: float, n: int) -> np.ndarray:
    """Sample indices of R peaks that a peak detector can see (not on an edge sample)."""
    idx = np.round(r_times * fs).astype(int)
    return idx[(idx >= 1) & (idx <= n - 2)]


def rr_cv(peak_idx: np.ndarray) -> float:
    rr = np.diff(np.sort(peak_idx))
    if rr.size < 2:
        return 0.0
    return float(rr.std() / rr.mean())


def generate_pair(cfg: SynthConfig, rng: np.random.Generator | None = None) -> SignalPair:
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n = cfg.n_samples
    fs = cfg.sample_rate
    t = np.arange(n) / fs
    rr_mean = 60.0 / cfg.heart_rate_mean
    r_times = _beat_times(rng, cfg.duration, rr_mean, cfg.rr_jitter, cfg.phase_ceiling)

    ecg = np.zeros(n)
    ppg = np.zeros(n)
    for r in r_times:
        ecg += _gauss(t, r, _R_WIDTH)
        for off, amp, width in (_P_WAVE, _T_WAVE):
            ecg += amp * _gauss(t, r + off, width)
        ppg += ppg_pulse(t - r - cfg.ptt_lag)

    if cfg.baseline_wander_amp > 0:
        f_wander = rng.uniform(0.1, 0.3)
        for sig in (ecg, ppg):
            sig += cfg.baseline_wander_amp * np.sin(2 * np.pi * f_wander * t + rng.uniform(0, 2 * np.pi))
    if cfg.noise_std > 0:
        ecg += cfg.noise_std * rng.standard_normal(n)
        ppg += cfg.noise_std * rng.standard_normal(n)

    cv = rr_cv(in_window_peaks(r_times, fs, n))
    return SignalPair(
        ecg=ecg,
        ppg=ppg,
        label_reg=planted_label(cfg, cfg.ptt_lag),
        label_cls=int(cv > AF_CV_THRESHOLD),
        ptt_lag=cfg.ptt_lag,
        rr_jitter=cfg.rr_jitter,
    )


def _sample_config(cfg: SynthConfig, rng: np.random.Generator) -> SynthConfig:
    changes = {}
    if cfg.ptt_lag_range is not None:
        changes["ptt_lag"] = float(rng.uniform(*cfg.ptt_lag_range))
        changes["ptt_lag_range"] = None
        changes["lag_ceiling"] = cfg.phase_ceiling
    if cfg.rr_jitter_choices is not None:
        changes["rr_jitter"] = float(rng.choice(cfg.rr_jitter_choices))
        changes["rr_jitter_choices"] = None
    if cfg.heart_rate_spread > 0:
        s = cfg.heart_rate_spread
        changes["heart_rate_mean"] = float(cfg.heart_rate_mean * rng.uniform(1 - s, 1 + s))
        changes["heart_rate_spread"] = 0.0
    return replace(cfg, **changes) if changes else cfg


def generate_pairs(cfg: SynthConfig, n: int) -> list[SignalPair]:
    cfg.validate()
    children = np.random.SeedSequence(cfg.seed).spawn(n)
    pairs = []
    for child in children:
        rng = np.random.default_rng(child)
        pairs.append(generate_pair(_sample_config(cfg, rng), rng))
    return pairs


def split_sizes(n: int, split: Sequence[float]) -> tuple[int, int, int]:
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9 or min(split) < 0:
        raise ValueError(f"split fractions {tuple(split)} must be three non-negative values summing to 1")
    n_val = int(np.floor(n * split[1] + 0.5))
    n_test = int(np.floor(n * split[2] + 0.5))
    n_train = n - n_val - n_test
    sizes = (n_train, n_val, n_test)
    if any(size <= 0 for size, frac in zip(sizes, split) if frac > 0):
        raise ValueError(f"n={n} too small for non-empty splits {tuple(split)} -> {sizes}")
    return sizes


def generate_dataset(
    cfg: SynthConfig, n: int, split: Sequence[float] = (0.6, 0.2, 0.2)
) -> tuple[list[SignalPair], list[SignalPair], list[SignalPair]]:
    n_train, n_val, _ = split_sizes(n, split)
    pairs = generate_pairs(cfg, n)
    order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1])).permutation(n)
    pairs = [pairs[i] for i in order]
    return pairs[:n_train], pairs[n_train : n_train + n_val], pairs[n_train + n_val :]


def label_stats(pairs: Sequence[SignalPair]) -> dict:
    if not pairs:
        return {"count": 0}
    reg = np.array([p.label_reg for p in pairs])
    cls = np.array([p.label_cls for p in pairs])
    return {
        "count": len(pairs),
        "label_reg_mean": float(reg.mean()),
        "label_reg_std": float(reg.std()),
        "label_cls_fraction_1": float(cls.mean()),
    }


# ---------------------------------------------------------------- containers

MAGIC = b"VCTDATA\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIdI")


def _record_dtype(w: int) -> np.dtype:
    return np.dtype(
        [
            ("ecg", "<f8", (w,)),
            ("ppg", "<f8", (w,)),
            ("ecg_present", "u1"),
            ("ppg_present", "u1"),
            ("label_reg", "<f8"),
            ("label_cls", "<i4"),
            ("ptt_lag", "<f8"),
            ("rr_jitter", "<f8"),
        ]
    )


def save_dataset(path, pairs: Sequence[SignalPair], sample_rate: float) -> None:
    """Binary container: fixed header followed by fixed-size little-endian records."""
    if not pairs:
        raise ValueError("cannot save an empty dataset")
    w = pairs[0].ecg.size
    rec = np.zeros(len(pairs), dtype=_record_dtype(w))
    for i, p in enumerate(pairs):
        if p.ecg.size != w:
            raise ValueError(f"record {i} has length {p.ecg.size}, expected {w}")
        rec[i] = (p.ecg, p.ppg, p.ecg_present, p.ppg_present, p.label_reg, p.label_cls, p.ptt_lag, p.rr_jitter)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, w, float(sample_rate), len(pairs)))
        fh.write(rec.tobytes())


def load_dataset(path) -> tuple[list[SignalPair], float]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, w, fs, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    dt = _record_dtype(w)
    expected = _HEADER.size + count * dt.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {count} records, found {len(raw)}")
    rec = np.frombuffer(raw, dtype=dt, offset=_HEADER.size, count=count)
    pairs = [
        SignalPair(
            ecg=r["ecg"].copy(),
            ppg=r["ppg"].copy(),
            ecg_present=bool(r["ecg_present"]),
            ppg_present=bool(r["ppg_present"]),
            label_reg=float(r["label_reg"]),
            label_cls=int(r["label_cls"]),
            ptt_lag=float(r["ptt_lag"]),
            rr_jitter=float(r["rr_jitter"]),
        )
        for r in rec
    ]
    return pairs, fs


def save_jsonl(path, pairs: Sequence[SignalPair]) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            row = {
                "ecg": p.ecg.tolist(),
                "ppg": p.ppg.tolist(),
                "ecg_present": p.ecg_present,
                "ppg_present": p.ppg_present,
                "label_reg": p.label_reg,
                "label_cls": p.label_cls,
                "ptt_lag": p.ptt_lag,
                "rr_jitter": p.rr_jitter,
            }
            fh.write(json.dumps(row) + "\n")


def load_jsonl(path) -> list[SignalPair]:
    with open(path) as fh:
        return [SignalPair(**json.loads(line)) for line in fh if line.strip()]


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
