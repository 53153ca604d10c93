"""Manifest records -> in-memory training features.

Audio is trimmed with the manifest's recorded threshold/padding, mel frames
are normalized with the manifest (or an explicitly frozen) mean/std, and the
16-bit sample levels are truncated to frames*hop so waveform and
conditioning lengths agree.  Batching is bucketed by length: utterances are
sorted by frame count into fixed groups, and every training step draws one
group from a step-seeded generator, which is what makes resumption replay
the exact batch sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..corpus import Manifest, ManifestRecord
from ..dsp import StftConfig, load_wav, mel_spectrogram, normalize_mel, trim_silence
from ..errors import DataError


@dataclass
class UtteranceFeatures:
    utt_id: str
    speaker_id: str
    tokens: np.ndarray  # [S] int
    mel: np.ndarray  # [T, n_mels] float32, normalized
    samples: np.ndarray  # [T * hop] int64 levels


@dataclass
class FeatureSet:
    utterances: list
    stft: StftConfig
    mel_mean: np.ndarray
    mel_std: np.ndarray
    alphabet_size: int
    speakers: list

    def by_speaker(self) -> dict:
        out = {}
        for u in self.utterances:
            out.setdefault(u.speaker_id, []).append(u)
        return out


def load_features(manifest: Manifest, stats: tuple | None = None,
                  with_samples: bool = False) -> FeatureSet:
    """stats overrides the manifest's mel mean/std (frozen base stats during
    adaptation); with_samples keeps the quantized waveform for vocoder work."""
    h = manifest.header
    stft = StftConfig(**h["stft"])
    if stats is None:
        mean = np.asarray(h["mel_mean"], dtype=np.float32)
        std = np.asarray(h["mel_std"], dtype=np.float32)
    else:
        mean = np.asarray(stats[0], dtype=np.float32)
        std = np.asarray(stats[1], dtype=np.float32)
    utts = []
    for rec in manifest.records:
        wav = load_wav(manifest.audio_path(rec))
        trimmed, _ = trim_silence(
            wav, threshold_db=h["trim"]["threshold_db"], pad_ms=h["trim"]["pad_ms"]
        )
        mel = mel_spectrogram(trimmed, stft)
        norm = normalize_mel(mel, mean, std)
        n = norm.shape[0]
        if n == 0:
            raise DataError(f"utterance {rec.utt_id} too short for one frame")
        if with_samples:
            levels = np.round(trimmed.samples * 32768.0).astype(np.int64)
            levels = np.clip(levels, -32768, 32767)[: n * stft.hop_length]
        else:
            levels = np.empty(0, dtype=np.int64)
        utts.append(
            UtteranceFeatures(
                utt_id=rec.utt_id,
                speaker_id=rec.speaker_id,
                tokens=np.asarray(rec.token_ids(), dtype=np.int64),
                mel=norm,
                samples=levels,
            )
        )
    return FeatureSet(
        utterances=utts,
        stft=stft,
        mel_mean=mean,
        mel_std=std,
        alphabet_size=h["alphabet_size"],
        speakers=[s["speaker_id"] for s in h["speakers"]],
    )


def length_buckets(features: FeatureSet, batch_size: int) -> list:
    """Consecutive groups of similarly long utterances; deterministic."""
    order = sorted(
        range(len(features.utterances)),
        key=lambda i: (features.utterances[i].mel.shape[0], features.utterances[i].utt_id),
    )
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


@dataclass
class SpectrumBatch:
    tokens: np.ndarray  # [B, S] padded with 0
    token_lengths: np.ndarray
    mel: np.ndarray  # [B, T, M] zero-padded, T a multiple of reduction
    frame_lengths: np.ndarray
    speaker_ids: list
    utt_ids: list


def collate_spectrum(utts: list, reduction: int) -> SpectrumBatch:
    b = len(utts)
    s_max = max(u.tokens.size for u in utts)
    t_raw = max(u.mel.shape[0] for u in utts)
    t_max = -(-t_raw // reduction) * reduction
    n_mels = utts[0].mel.shape[1]
    tokens = np.zeros((b, s_max), dtype=np.int64)
    mel = np.zeros((b, t_max, n_mels), dtype=np.float32)
    tl = np.zeros(b, dtype=np.int64)
    fl = np.zeros(b, dtype=np.int64)
    for i, u in enumerate(utts):
        tokens[i, : u.tokens.size] = u.tokens
        mel[i, : u.mel.shape[0]] = u.mel
        tl[i] = u.tokens.size
        fl[i] = u.mel.shape[0]
    return SpectrumBatch(
        tokens=tokens, token_lengths=tl, mel=mel, frame_lengths=fl,
        speaker_ids=[u.speaker_id for u in utts], utt_ids=[u.utt_id for u in utts],
    )


def pick_spectrum_batch(features: FeatureSet, buckets: list, reduction: int,
                        rng: np.random.Generator) -> SpectrumBatch:
    group = buckets[int(rng.integers(len(buckets)))]
    return collate_spectrum([features.utterances[i] for i in group], reduction)


@dataclass
class VocoderBatch:
    samples: np.ndarray  # [B, E * hop] int levels
    mel: np.ndarray  # [B, E, M]
    speaker_ids: list


def pick_vocoder_batch(features: FeatureSet, batch_size: int, excerpt_frames: int,
                       hop: int, rng: np.random.Generator) -> VocoderBatch:
    """Random fixed-length windows, frame-aligned so conditioning matches."""
    eligible = [u for u in features.utterances if u.mel.shape[0] >= excerpt_frames]
    if not eligible:
        raise DataError(
            f"no utterance has {excerpt_frames} frames; shorten the excerpt"
        )
    if eligible[0].samples.size == 0:
        raise DataError("features were loaded without samples; pass with_samples=True")
    mels, samples, ids = [], [], []
    for _ in range(batch_size):
        u = eligible[int(rng.integers(len(eligible)))]
        f0 = int(rng.integers(u.mel.shape[0] - excerpt_frames + 1))
        mels.append(u.mel[f0 : f0 + excerpt_frames])
        samples.append(u.samples[f0 * hop : (f0 + excerpt_frames) * hop])
        ids.append(u.speaker_id)
    return VocoderBatch(
        samples=np.stack(samples), mel=np.stack(mels).astype(np.float32),
        speaker_ids=ids,
    )
