"""Audio I/O, resampling, silence trimming and log-mel analysis.

Everything downstream consumes 16 kHz mono in [-1, 1].  Mel analysis is
center-free: frame t covers samples [t*hop, t*hop + win), so there are
1 + floor((len - win) / hop) frames and no padding artifacts at the edges.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np
from scipy.signal import resample_poly

from .errors import AudioFormatError, DataError

SAMPLE_RATE = 16000

# silence trim analyzes energy over causal 25 ms windows
TRIM_WINDOW_MS = 25.0


@dataclass
class Waveform:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioFormatError(f"expected mono samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise AudioFormatError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class StftConfig:
    fft_size: int = 1024
    window_length: int = 800
    hop_length: int = 200
    n_mels: int = 80
    fmin: float = 40.0
    fmax: float = 7600.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if not (0 < self.hop_length <= self.window_length <= self.fft_size):
            raise DataError("need 0 < hop <= window <= fft_size")
        if not (0 <= self.fmin < self.fmax):
            raise DataError("need 0 <= fmin < fmax")
        if self.log_floor <= 0:
            raise DataError("log_floor must be positive")


def load_wav(path) -> Waveform:
    """Read 16-bit PCM mono WAV; samples come back as n/32768 in float64."""
    try:
        with wave.open(str(path), "rb") as f:
            n_channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            n = f.getnframes()
            raw = f.readframes(n)
    except (wave.Error, EOFError) as e:
        raise AudioFormatError(f"cannot read {path}: {e}") from e
    if n_channels != 1:
        raise AudioFormatError(f"{path}: expected mono, got {n_channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if n == 0:
        raise AudioFormatError(f"{path}: zero-length payload")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def save_wav(wav: Waveform, path) -> None:
    if len(wav.samples) == 0:
        raise AudioFormatError("refusing to write zero-length WAV")
    clipped = np.clip(wav.samples, -1.0, 32767.0 / 32768.0)
    ints = np.round(clipped * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(wav.sample_rate)
        f.writeframes(ints.tobytes())


def resample_to_16k(wav: Waveform) -> Waveform:
    if wav.sample_rate == SAMPLE_RATE:
        return wav
    if wav.sample_rate < SAMPLE_RATE:
        raise AudioFormatError(
            f"source rate {wav.sample_rate} below {SAMPLE_RATE}; upsampling unsupported"
        )
    if wav.sample_rate % SAMPLE_RATE == 0:
        up, down = 1, wav.sample_rate // SAMPLE_RATE
    else:
        g = np.gcd(wav.sample_rate, SAMPLE_RATE)
        up, down = SAMPLE_RATE // g, wav.sample_rate // g
        if up > 200:
            raise AudioFormatError(f"no simple rational ratio from {wav.sample_rate} to 16000")
    out = resample_poly(wav.samples, up, down)
    return Waveform(np.clip(out, -1.0, 1.0), SAMPLE_RATE)


def trim_silence(
    wav: Waveform, threshold_db: float = -40.0, pad_ms: float = 50.0
) -> tuple[Waveform, bool]:
    """Cut leading/trailing low-energy regions, re-attach exactly pad_ms of
    zeros per end.  Returns (trimmed, all_silent).

    Energy is a causal moving sum of squared samples over a 25 ms window,
    compared against threshold * window without ever dividing the data; for
    16-bit-quantized samples every partial sum is exact in float64, which
    makes the operation exactly idempotent: the second pass cuts precisely
    at the re-attached padding.
    """
    if threshold_db >= 0:
        raise DataError("threshold_db must be negative")
    if pad_ms < 0:
        raise DataError("pad_ms must be >= 0")
    x = wav.samples
    win = max(int(round(TRIM_WINDOW_MS * wav.sample_rate / 1000.0)), 1)
    pad = int(round(pad_ms * wav.sample_rate / 1000.0))
    amp = 10.0 ** (threshold_db / 20.0)
    thr = amp * amp * win  # compare window *sums*, not means

    def first_loud(sig: np.ndarray) -> int | None:
        sq = sig * sig
        cs = np.cumsum(sq)
        sums = cs.copy()
        sums[win:] = cs[win:] - cs[:-win]
        hits = np.nonzero(sums >= thr)[0]
        if len(hits) == 0:
            return None
        return max(int(hits[0]) - win + 1, 0)

    start = first_loud(x)
    zeros = np.zeros(pad, dtype=np.float64)
    if start is None:
        return Waveform(np.concatenate([zeros, zeros]), wav.sample_rate), True
    end_rev = first_loud(x[::-1])
    end = len(x) - end_rev
    core = x[start:end]
    return Waveform(np.concatenate([zeros, core, zeros]), wav.sample_rate), False


def hann_window(length: int) -> np.ndarray:
    # periodic variant, standard for STFT analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def frame_count(n_samples: int, cfg: StftConfig) -> int:
    if n_samples < cfg.window_length:
        raise DataError(f"signal of {n_samples} samples shorter than one {cfg.window_length} window")
    return 1 + (n_samples - cfg.window_length) // cfg.hop_length


def stft_magnitude(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """[frames, fft/2+1] magnitudes, windowed frames right-padded to fft_size."""
    x = np.asarray(samples, dtype=np.float64)
    n_frames = frame_count(len(x), cfg)
    idx = np.arange(cfg.window_length)[None, :] + cfg.hop_length * np.arange(n_frames)[:, None]
    frames = x[idx] * hann_window(cfg.window_length)[None, :]
    return np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: StftConfig, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """[n_mels, fft/2+1] triangular filters, each normalized to unit area."""
    if cfg.fmax > sample_rate / 2:
        raise DataError(f"fmax {cfg.fmax} above Nyquist {sample_rate / 2}")
    n_bins = cfg.fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate / cfg.fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_bins))
    for i in range(cfg.n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (bin_hz - lo) / (mid - lo)
        down = (hi - bin_hz) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(up, down)) * (2.0 / (hi - lo))
    return fb


def mel_spectrogram(wav: Waveform, cfg: StftConfig) -> np.ndarray:
    """[frames, n_mels] natural-log mel magnitudes, floored at cfg.log_floor."""
    if wav.sample_rate != SAMPLE_RATE:
        raise AudioFormatError(f"mel analysis expects {SAMPLE_RATE} Hz, got {wav.sample_rate}")
    mag = stft_magnitude(wav.samples, cfg)
    mel = mag @ mel_filterbank(cfg).T
    return np.log(np.maximum(mel, cfg.log_floor)).astype(np.float32)


def mel_stats(mels: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin mean and standard deviation over a whole corpus."""
    stacked = np.concatenate([np.asarray(m, dtype=np.float64) for m in mels], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    return mean, np.maximum(std, 1e-6)


def normalize_mel(mel: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((mel - mean) / std).astype(np.float32)


def denormalize_mel(mel: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (np.asarray(mel, dtype=np.float64) * std + mean).astype(np.float32)
