import wave

import numpy as np
import pytest

from mstts import dsp
from mstts.errors import AudioFormatError, DataError


def sine(freq, seconds=1.0, rate=16000, amp=0.5):
    t = np.arange(int(seconds * rate)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


def quantized(x):
    return np.round(np.asarray(x) * 32768.0) / 32768.0


def test_wav_round_trip_within_quantization(tmp_path):
    w = dsp.Waveform(sine(440))
    path = tmp_path / "a.wav"
    dsp.save_wav(w, path)
    back = dsp.load_wav(path)
    assert back.sample_rate == 16000
    assert len(back.samples) == len(w.samples)
    assert np.max(np.abs(back.samples - w.samples)) <= 2 / 65535


def test_save_rejects_empty(tmp_path):
    with pytest.raises(AudioFormatError):
        dsp.save_wav(dsp.Waveform(np.zeros(0)), tmp_path / "e.wav")


def test_load_rejects_empty_payload(tmp_path):
    path = tmp_path / "empty.wav"
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(16000)
    with pytest.raises(AudioFormatError):
        dsp.load_wav(path)


def test_load_rejects_stereo(tmp_path):
    path = tmp_path / "st.wav"
    data = (np.zeros(64, dtype="<i2")).tobytes()
    with wave.open(str(path), "wb") as f:
        f.setnchannels(2)
        f.setsampwidth(2)
        f.setframerate(16000)
        f.writeframes(data)
    with pytest.raises(AudioFormatError, match="mono"):
        dsp.load_wav(path)


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "junk.wav"
    path.write_bytes(b"not a riff header at all")
    with pytest.raises(AudioFormatError):
        dsp.load_wav(path)


def test_resample_identity_at_16k():
    w = dsp.Waveform(sine(440))
    assert dsp.resample_to_16k(w) is w


def test_resample_48k_keeps_spectral_peak():
    w48 = dsp.Waveform(sine(1000, rate=48000), 48000)
    out = dsp.resample_to_16k(w48)
    assert out.sample_rate == 16000
    assert abs(len(out.samples) - 16000) <= 1
    spec = np.abs(np.fft.rfft(out.samples))
    peak_hz = np.argmax(spec) * 16000 / len(out.samples)
    assert abs(peak_hz - 1000) < 2


def test_resample_rejects_upsampling():
    with pytest.raises(AudioFormatError):
        dsp.resample_to_16k(dsp.Waveform(np.zeros(100), 8000))


def test_trim_cuts_both_ends_to_padding():
    x = np.concatenate([np.zeros(8000), quantized(sine(440, 1.0)), np.zeros(11200)])
    out, silent = dsp.trim_silence(dsp.Waveform(x), pad_ms=50.0)
    assert not silent
    pad = 800  # 50 ms
    win = 400  # 25 ms analysis window
    energy = out.samples**2
    loud = np.nonzero(energy > 1e-4)[0]
    # silence kept at each end: at least the pad, at most pad + one window
    assert pad <= loud[0] <= pad + win
    assert pad <= len(out.samples) - 1 - loud[-1] <= pad + win
    assert out.duration < dsp.Waveform(x).duration


def test_trim_no_silent_ends_only_pads():
    x = quantized(sine(440, 0.5))
    out, silent = dsp.trim_silence(dsp.Waveform(x), pad_ms=50.0)
    assert not silent
    assert len(out.samples) == len(x) + 1600
    assert np.array_equal(out.samples[800:-800], x)


def test_trim_pure_silence_flags_and_pads():
    out, silent = dsp.trim_silence(dsp.Waveform(np.zeros(16000)), pad_ms=50.0)
    assert silent
    assert len(out.samples) == 1600
    assert not np.any(out.samples)


def test_trim_idempotent_bit_exact():
    rng = np.random.default_rng(0)
    x = np.concatenate(
        [
            0.001 * rng.normal(size=3000),  # below threshold but nonzero
            sine(300, 0.8, amp=0.4),
            0.002 * rng.normal(size=5000),
        ]
    )
    once, _ = dsp.trim_silence(dsp.Waveform(quantized(x)))
    twice, _ = dsp.trim_silence(once)
    assert np.array_equal(once.samples, twice.samples)


def test_trim_validates_arguments():
    w = dsp.Waveform(np.zeros(100))
    with pytest.raises(DataError):
        dsp.trim_silence(w, threshold_db=3.0)
    with pytest.raises(DataError):
        dsp.trim_silence(w, pad_ms=-1.0)


def test_frame_count_formula_and_short_error():
    cfg = dsp.StftConfig()
    assert dsp.frame_count(800, cfg) == 1
    assert dsp.frame_count(999, cfg) == 1
    assert dsp.frame_count(1000, cfg) == 2
    with pytest.raises(DataError):
        dsp.frame_count(799, cfg)


def test_mel_zero_signal_hits_floor():
    cfg = dsp.StftConfig()
    mel = dsp.mel_spectrogram(dsp.Waveform(np.zeros(16000)), cfg)
    assert mel.shape == (77, 80)
    assert np.all(mel == np.float32(np.log(1e-5)))


def test_mel_peak_bin_matches_analytic_edges():
    cfg = dsp.StftConfig()
    mel = dsp.mel_spectrogram(dsp.Waveform(sine(1000, 2.0)), cfg)
    got = np.argmax(mel.mean(axis=0))
    # independently place 1 kHz on the triangle grid
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    edges = to_hz(np.linspace(to_mel(40.0), to_mel(7600.0), 82))
    best, best_w = None, -1.0
    for i in range(80):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        w = max(0.0, min((1000 - lo) / (mid - lo), (hi - 1000) / (hi - mid))) * 2.0 / (hi - lo)
        if w > best_w:
            best, best_w = i, w
    assert got == best


def test_stft_parseval_energy_match():
    rng = np.random.default_rng(1)
    cfg = dsp.StftConfig()
    x = rng.uniform(-0.5, 0.5, size=16000)
    mag = dsp.stft_magnitude(x, cfg)
    freq_energy = (mag[:, 0] ** 2 + 2 * np.sum(mag[:, 1:-1] ** 2, axis=1) + mag[:, -1] ** 2) / cfg.fft_size
    win = dsp.hann_window(cfg.window_length)
    n_frames = mag.shape[0]
    time_energy = np.array(
        [np.sum((x[t * 200 : t * 200 + 800] * win) ** 2) for t in range(n_frames)]
    )
    assert np.all(np.abs(freq_energy - time_energy) <= 0.01 * time_energy)


def test_mel_shift_covariance_one_hop():
    rng = np.random.default_rng(2)
    cfg = dsp.StftConfig()
    x = rng.uniform(-0.5, 0.5, size=8000)
    delayed = np.concatenate([np.zeros(cfg.hop_length), x])
    m0 = dsp.mel_spectrogram(dsp.Waveform(x), cfg)
    m1 = dsp.mel_spectrogram(dsp.Waveform(delayed), cfg)
    assert np.array_equal(m1[1 : len(m0) + 1], m0)


def test_filterbank_rows_nonnegative_contiguous():
    fb = dsp.mel_filterbank(dsp.StftConfig())
    assert np.all(fb >= 0)
    for row in fb:
        nz = np.nonzero(row)[0]
        assert len(nz) > 0
        assert np.array_equal(nz, np.arange(nz[0], nz[-1] + 1))


def test_filterbank_rejects_fmax_above_nyquist():
    with pytest.raises(DataError):
        dsp.mel_filterbank(dsp.StftConfig(fmax=9000.0))


def test_mel_rejects_wrong_rate():
    with pytest.raises(AudioFormatError):
        dsp.mel_spectrogram(dsp.Waveform(np.zeros(48000), 48000), dsp.StftConfig())


def test_mel_normalization_round_trip():
    rng = np.random.default_rng(3)
    mels = [rng.normal(size=(40, 8)).astype(np.float32) for _ in range(3)]
    mean, std = dsp.mel_stats(mels)
    normed = dsp.normalize_mel(mels[0], mean, std)
    back = dsp.denormalize_mel(normed, mean, std)
    assert np.allclose(back, mels[0], atol=1e-4)
    stacked = np.concatenate([dsp.normalize_mel(m, mean, std) for m in mels])
    assert np.allclose(stacked.mean(axis=0), 0.0, atol=1e-4)
    assert np.allclose(stacked.std(axis=0), 1.0, atol=1e-3)
