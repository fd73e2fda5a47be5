import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate, find_peaks

from vct.synth import (
    AF_CV_THRESHOLD,
    SignalPair,
    SynthConfig,
    generate_dataset,
    generate_pair,
    generate_pairs,
    label_stats,
    load_dataset,
    load_jsonl,
    save_dataset,
    save_jsonl,
    split_sizes,
)


def _r_peaks(ecg, fs):
    # refractory distance of 0.3 s keeps T waves from counting as beats
    idx, _ = find_peaks(ecg, prominence=0.2, distance=int(0.3 * fs))
    return idx


def _ppg_peaks(ppg, fs):
    idx, _ = find_peaks(ppg, prominence=0.3, distance=int(0.3 * fs))
    return idx


@pytest.mark.parametrize("lag", [0.1, 0.2, 0.3])
def test_noiseless_periodic_pair_has_exact_lag(lag):
    cfg = SynthConfig(sample_rate=100, duration=6, heart_rate_mean=60, ptt_lag=lag, lag_ceiling=0.35, seed=3)
    pair = generate_pair(cfg)
    r = _r_peaks(pair.ecg, cfg.sample_rate)
    rr = np.diff(r)
    assert rr.max() - rr.min() <= 1  # periodic up to sample rounding
    p = _ppg_peaks(pair.ppg, cfg.sample_rate)
    # match each R peak with the first PPG peak after it
    for ri in r:
        later = p[p > ri]
        if later.size and later[0] - ri < cfg.sample_rate * 0.6:
            assert abs((later[0] - ri) - lag * cfg.sample_rate) <= 1


def test_planted_label_value():
    assert generate_pair(SynthConfig(ptt_lag=0.2)).label_reg == 90.0


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("lag", [0.1, 0.2, 0.3])
def test_cross_correlation_argmax_is_lag(seed, lag):
    cfg = SynthConfig(heart_rate_mean=60, ptt_lag=lag, lag_ceiling=0.45, seed=seed)
    pair = generate_pair(cfg)
    e, p = pair.ecg - pair.ecg.mean(), pair.ppg - pair.ppg.mean()
    c = correlate(p, e, mode="full")
    assert np.argmax(c) - (len(e) - 1) == round(lag * cfg.sample_rate)


def test_af_label_matches_rr_interval_oracle():
    cfg = SynthConfig(rr_jitter_choices=(0.02, 0.2), seed=11)
    pairs = generate_pairs(cfg, 1000)
    agree = 0
    for p in pairs:
        rr = np.diff(_r_peaks(p.ecg, cfg.sample_rate))
        cv = rr.std() / rr.mean() if rr.size >= 2 else 0.0
        agree += int(cv > AF_CV_THRESHOLD) == p.label_cls
    assert agree >= 990
    # the label tracks the rhythm group it was drawn from
    high = np.array([p.rr_jitter == 0.2 for p in pairs])
    cls = np.array([p.label_cls for p in pairs])
    assert cls[high].mean() > 0.5 > cls[~high].mean()


def test_split_sizes_six_two_two():
    tr, va, te = generate_dataset(SynthConfig(), 10)
    assert (len(tr), len(va), len(te)) == (6, 2, 2)
    with pytest.raises(ValueError):
        split_sizes(2, (0.6, 0.2, 0.2))
    with pytest.raises(ValueError):
        split_sizes(10, (0.5, 0.2, 0.2))


def test_dataset_is_deterministic_and_disjoint():
    cfg = SynthConfig(ptt_lag_range=(0.15, 0.3), noise_std=0.02, seed=5)
    a = generate_dataset(cfg, 30)
    b = generate_dataset(cfg, 30)
    for sa, sb in zip(a, b):
        assert all(x.ecg.tobytes() == y.ecg.tobytes() and x.ppg.tobytes() == y.ppg.tobytes() for x, y in zip(sa, sb))
    keys = [p.ecg.tobytes() for split in a for p in split]
    assert len(set(keys)) == 30


def test_class_proportions_agree_across_splits():
    cfg = SynthConfig(rr_jitter_choices=(0.02, 0.2), seed=2)
    tr, _, te = generate_dataset(cfg, 1000)
    assert abs(label_stats(tr)["label_cls_fraction_1"] - label_stats(te)["label_cls_fraction_1"]) < 0.05


def test_label_depends_on_lag_only():
    base = SynthConfig(ptt_lag=0.22, noise_std=0.05, lag_ceiling=0.3)
    a = generate_pair(base, np.random.default_rng(1))
    b = generate_pair(base, np.random.default_rng(2))
    assert a.label_reg == b.label_reg
    assert not np.array_equal(a.ecg, b.ecg)


def test_changing_lag_leaves_ecg_untouched():
    cfg = SynthConfig(noise_std=0.03, baseline_wander_amp=0.1, lag_ceiling=0.3)
    a = generate_pair(SynthConfig(**{**cfg.__dict__, "ptt_lag": 0.15}), np.random.default_rng(7))
    b = generate_pair(SynthConfig(**{**cfg.__dict__, "ptt_lag": 0.28}), np.random.default_rng(7))
    assert a.ecg.tobytes() == b.ecg.tobytes()
    assert a.label_reg != b.label_reg
    assert not np.array_equal(a.ppg, b.ppg)


@pytest.mark.parametrize(
    "kw",
    [
        dict(rr_jitter=0.5),
        dict(ptt_lag=0.0),
        dict(ptt_lag=1.0),
        dict(duration=4.03),
        dict(patch_len=7),
        dict(noise_std=-1.0),
    ],
)
def test_config_invariants_rejected(kw):
    with pytest.raises(ValueError):
        generate_pair(SynthConfig(**kw))


def test_signal_pair_shape_check():
    with pytest.raises(ValueError):
        SignalPair(np.zeros(5), np.zeros(6))


def test_container_and_jsonl_round_trip(tmp_path):
    pairs = generate_pairs(SynthConfig(ptt_lag_range=(0.15, 0.3), noise_std=0.02), 7)
    pairs[2].ppg[:] = 0.0
    pairs[2].ppg_present = False
    save_dataset(tmp_path / "d.vctd", pairs, 50.0)
    back, fs = load_dataset(tmp_path / "d.vctd")
    assert fs == 50.0
    save_jsonl(tmp_path / "d.jsonl", pairs)
    for other in (back, load_jsonl(tmp_path / "d.jsonl")):
        for p, q in zip(pairs, other):
            assert p.ecg.tobytes() == q.ecg.tobytes() and p.ppg.tobytes() == q.ppg.tobytes()
            assert (p.ecg_present, p.ppg_present, p.label_reg, p.label_cls) == (q.ecg_present, q.ppg_present, q.label_reg, q.label_cls)


def test_container_rejects_truncation(tmp_path):
    save_dataset(tmp_path / "d.vctd", generate_pairs(SynthConfig(), 3), 50.0)
    blob = (tmp_path / "d.vctd").read_bytes()
    (tmp_path / "t.vctd").write_bytes(blob[:-1])
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "t.vctd")


@settings(max_examples=25, deadline=None)
@given(lag=st.floats(0.05, 0.5), hr=st.floats(50, 90), seed=st.integers(0, 10_000))
def test_generated_pairs_are_finite_and_sized(lag, hr, seed):
    rr = 60.0 / hr
    if lag >= rr - 0.05:
        return
    cfg = SynthConfig(ptt_lag=lag, heart_rate_mean=hr, noise_std=0.01, seed=seed)
    p = generate_pair(cfg)
    assert p.ecg.shape == p.ppg.shape == (cfg.n_samples,)
    assert np.all(np.isfinite(p.ecg)) and np.all(np.isfinite(p.ppg))
    assert p.label_reg == pytest.approx(100 - 50 * lag)
