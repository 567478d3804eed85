import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.fft import dct
from scipy.stats import chisquare

from cider.dsp import (
    FeatureConfig,
    Standardizer,
    Waveform,
    chunk_recording,
    chunk_valid_lengths,
    load_audio,
    load_feature_matrix,
    mfcc,
    pad_by_repetition,
    read_wav,
    sample_window,
    save_feature_matrix,
    write_wav,
)
from cider.errors import AudioError, AudioFormatError, ContractError, DSPError

from conftest import SR, tone


def reference_mfcc(x, sr, n_mfcc=40, n_mels=64, L=400, H=160, n_fft=512, fmin=20.0, fmax=8000.0):
    """Frame-by-frame loop with an explicitly built HTK filterbank."""
    mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
    inv = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    pts = [inv(m) for m in np.linspace(mel(fmin), mel(fmax), n_mels + 2)]
    bins = np.arange(n_fft // 2 + 1) * sr / n_fft
    fb = np.zeros((n_mels, bins.size))
    for j in range(n_mels):
        lo, c, hi = pts[j], pts[j + 1], pts[j + 2]
        for k, f in enumerate(bins):
            if lo < f <= c:
                fb[j, k] = (f - lo) / (c - lo)
            elif c < f < hi:
                fb[j, k] = (hi - f) / (hi - c)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(L) / L)
    cols = []
    for start in range(0, len(x) - L + 1, H):
        spec = np.abs(np.fft.rfft(x[start : start + L] * win, n_fft)) ** 2
        cols.append(np.log(np.maximum(fb @ spec, 1e-10)))
    return dct(np.array(cols).T, type=2, axis=0, norm="ortho")[:n_mfcc]


def test_frame_count_six_seconds():
    cfg = FeatureConfig()
    assert cfg.frame_samples == 400 and cfg.hop_samples == 160 and cfg.n_fft == 512
    assert cfg.n_frames() == 598
    assert mfcc(tone(440, 6.0), cfg).shape == (40, 598)


def test_mfcc_matches_reference_loop(rng):
    x = rng.standard_normal(SR // 2) * 0.1 + tone(300, 0.5).samples
    got = mfcc(Waveform(x, SR), FeatureConfig())
    assert np.allclose(got, reference_mfcc(x, SR), rtol=1e-9, atol=1e-8)


def test_mfcc_distinguishes_tones():
    cfg = FeatureConfig()
    a, b = mfcc(tone(440, 1.0), cfg), mfcc(tone(880, 1.0), cfg)
    assert np.linalg.norm(a.mean(1) - b.mean(1)) > 0


def test_mfcc_silence_is_finite_and_constant():
    f = mfcc(Waveform(np.zeros(SR), SR), FeatureConfig())
    assert np.all(np.isfinite(f))
    assert np.all(f == f[:, :1])


def test_mfcc_deterministic(rng):
    w = Waveform(rng.standard_normal(SR), SR)
    assert np.array_equal(mfcc(w, FeatureConfig()), mfcc(w, FeatureConfig()))


def test_mfcc_errors():
    with pytest.raises(DSPError):
        mfcc(Waveform(np.zeros(100), SR), FeatureConfig())
    with pytest.raises(DSPError):
        mfcc(Waveform(np.zeros(8000), 8000), FeatureConfig())


def test_waveform_rejects_nan():
    with pytest.raises(DSPError):
        Waveform(np.array([0.0, np.nan]), SR)


# -- padding, windowing, chunking -----------------------------------------------

@given(n=st.integers(1, 300), extra=st.integers(1, 900), seed=st.integers(0, 2**16))
def test_pad_by_repetition_periodic(n, extra, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    out = pad_by_repetition(Waveform(x, SR), n + extra).samples
    assert out.size == n + extra
    assert np.array_equal(out[:n], x)
    assert np.array_equal(out[n:], out[:-n])


def test_pad_by_repetition_contract():
    w = Waveform(np.ones(10), SR)
    with pytest.raises(ContractError):
        pad_by_repetition(w, 10)
    with pytest.raises(ContractError):
        pad_by_repetition(Waveform(np.zeros(0), SR), 5)


def test_short_clip_padding_example():
    # 2.5 s -> 6 s: the clip is tiled 2.4 times
    cfg = FeatureConfig()
    x = np.random.default_rng(0).standard_normal(40000)
    out = sample_window(Waveform(x, SR), cfg, np.random.default_rng(0)).samples
    assert out.size == 96000
    assert np.array_equal(out[40000:80000], x) and np.array_equal(out[80000:], x[:16000])


@given(n=st.integers(1, 40000), seed=st.integers(0, 2**16))
@settings(max_examples=50, deadline=None)
def test_sample_window_duration_constant(n, seed):
    cfg = FeatureConfig(window_seconds=1.0)
    rng = np.random.default_rng(seed)
    w = Waveform(rng.standard_normal(n), SR)
    out = sample_window(w, cfg, rng)
    assert len(out) == cfg.window_samples


def test_sample_window_start_uniform():
    # 1 s excerpts of a 1.01 s ramp: the start offset is readable from the first sample
    cfg = FeatureConfig(window_seconds=1.0)
    w = Waveform(np.arange(SR + 9, dtype=float) / 1e5, SR)
    rng = np.random.default_rng(5)
    starts = [int(round(sample_window(w, cfg, rng).samples[0] * 1e5)) for _ in range(5000)]
    counts = np.bincount(starts, minlength=10)
    assert counts.size == 10
    assert chisquare(counts).pvalue > 1e-3


@given(n=st.integers(1, 5 * SR), mode=st.sampled_from(["remainder", "wrap"]), seed=st.integers(0, 99))
@settings(max_examples=60, deadline=None)
def test_chunk_reconstruction(n, mode, seed):
    cfg = FeatureConfig(window_seconds=1.0, remainder_padding=mode)
    x = np.random.default_rng(seed).standard_normal(n)
    chunks = chunk_recording(Waveform(x, SR), cfg)
    valid = chunk_valid_lengths(n, cfg)
    assert len(chunks) == -(-n // cfg.window_samples) == len(valid)
    assert all(len(c) == cfg.window_samples for c in chunks)
    assert np.array_equal(np.concatenate([c.samples[:v] for c, v in zip(chunks, valid)]), x)


def test_chunk_counts():
    cfg = FeatureConfig()
    assert len(chunk_recording(tone(200, 14.0), cfg)) == 3
    w = tone(200, 6.0)
    (only,) = chunk_recording(w, cfg)
    assert np.array_equal(only.samples, w.samples)


def test_wrap_mode_continues_from_start():
    cfg = FeatureConfig(window_seconds=1.0, remainder_padding="wrap")
    x = np.arange(SR + 100, dtype=float) / 1e6
    last = chunk_recording(Waveform(x, SR), cfg)[-1].samples
    assert np.array_equal(last[:100], x[SR:])
    assert np.array_equal(last[100:], x[: SR - 100])


# -- audio I/O -------------------------------------------------------------------

def test_wav_roundtrip(tmp_path):
    w = tone(500, 0.25)
    write_wav(tmp_path / "a.wav", w)
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == SR and len(back) == len(w)
    assert np.max(np.abs(back.samples - w.samples)) < 1.0 / 32767


def test_load_audio_resamples(tmp_path):
    write_wav(tmp_path / "a.wav", tone(500, 0.5, sr=8000))
    w = load_audio(tmp_path / "a.wav", SR)
    assert w.sample_rate == SR and len(w) == SR // 2


def test_read_wav_errors(tmp_path):
    with pytest.raises(AudioError):
        read_wav(tmp_path / "missing.wav")
    (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(AudioFormatError):
        read_wav(tmp_path / "junk.wav")


def test_feature_dump_roundtrip(tmp_path, rng):
    cfg = FeatureConfig()
    values = rng.standard_normal((40, 598))
    save_feature_matrix(tmp_path / "f.bin", values, cfg)
    back, header = load_feature_matrix(tmp_path / "f.bin")
    assert back.shape == (40, 598) and back.dtype == np.dtype("<f4")
    assert np.array_equal(back, values.astype("<f4"))
    assert header["config_hash"] == cfg.config_hash()


def test_standardizer_zero_planes_stay_zero(rng):
    stacks = [rng.standard_normal((2, 3, 10)) * 4 + 1 for _ in range(5)]
    st_ = Standardizer.fit(stacks)
    z = st_.apply(np.concatenate(stacks, axis=2))
    assert np.allclose(z.mean(axis=2), 0, atol=1e-12)
    assert np.allclose(z.std(axis=2), 1, atol=1e-6)
    out = st_.apply(stacks[0], present=[True, False])
    assert np.all(out[1] == 0)
