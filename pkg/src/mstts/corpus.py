"""Synthetic multi-speaker corpus: parametric speakers, token-aligned audio,
JSON Lines manifests.

Each utterance is an additive harmonic signal.  Token identity sets two
formant-like spectral peaks, the speaker contributes a base f0, two fixed
resonances, a speaking rate and an amplitude-arch shape, so speaker identity
is acoustically encoded and the token-to-audio alignment is monotonic by
construction (tokens are rendered strictly left to right, one slot each).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .canon import fingerprint
from .errors import DataError

MIN_TOKENS = 8
MAX_TOKENS = 24
TOKEN_BOUNDARY_RAMP_S = 0.010

HEADER_KEY = "__header__"


@dataclass
class SyntheticSpeakerSpec:
    speaker_id: str
    f0: float
    f0_jitter: float
    resonances: tuple[float, float]
    rate: float  # tokens per second
    env_shape: float
    seed: int

    def __post_init__(self):
        if not (60.0 <= self.f0 <= 400.0):
            raise DataError(f"f0 {self.f0} outside [60, 400]")
        if any(r >= 8000.0 or r <= 0 for r in self.resonances):
            raise DataError(f"resonances {self.resonances} must lie in (0, 8000)")
        if self.rate <= 0:
            raise DataError("rate must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["resonances"] = list(self.resonances)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpeakerSpec":
        d = dict(d)
        d["resonances"] = tuple(d["resonances"])
        return cls(**d)


def default_speaker_specs(n_speakers: int, seed: int) -> list[SyntheticSpeakerSpec]:
    """Well-separated speakers: geometric f0 ladder plus jittered resonances."""
    rng = np.random.default_rng([seed, 0x5EED])
    specs = []
    for i in range(n_speakers):
        f0 = 105.0 * 1.17**i + float(rng.uniform(-3, 3))
        r1 = 450.0 + 170.0 * (i % 4) + float(rng.uniform(-25, 25))
        r2 = 1700.0 + 330.0 * ((i * 2 + 1) % 5) + float(rng.uniform(-40, 40))
        specs.append(
            SyntheticSpeakerSpec(
                speaker_id=f"spk{i}",
                f0=min(f0, 400.0),
                f0_jitter=float(rng.uniform(0.01, 0.03)),
                resonances=(r1, r2),
                rate=float(rng.uniform(10.0, 14.0)),
                env_shape=float(rng.uniform(0.2, 0.6)),
                seed=seed * 1000 + i,
            )
        )
    return specs


def _gauss(f, center, width):
    return np.exp(-0.5 * ((f - center) / width) ** 2)


def token_formants(token: int) -> tuple[float, float]:
    return 350.0 + 130.0 * (token % 8), 1500.0 + 350.0 * (token // 8)


def render_utterance(
    spec: SyntheticSpeakerSpec, tokens, rng: np.random.Generator, sample_rate: int = dsp.SAMPLE_RATE
) -> np.ndarray:
    """Float64 samples in [-1, 1]; token slots of exactly sample_rate/rate
    samples between short random silences."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) == 0:
        raise DataError("empty token sequence")
    tok_len = int(round(sample_rate / spec.rate))
    n = tok_len * len(tokens)

    # phase-continuous f0 with slow vibrato and a per-utterance jitter offset
    base = spec.f0 * (1.0 + float(np.clip(spec.f0_jitter * rng.normal(), -0.06, 0.06)))
    vib_phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(n) / sample_rate
    f_inst = base * (1.0 + 0.01 * np.sin(2 * np.pi * 4.5 * t + vib_phase))
    phase = 2 * np.pi * np.cumsum(f_inst) / sample_rate

    n_harm = max(int(7600.0 // (base * 1.08)), 3)
    h = np.arange(1, n_harm + 1)
    harm_hz = h * base

    # spectral shaping: token formants move, speaker resonances stay put; the
    # rolloff knee rides on the first resonance so spectral tilt is speaker-bound
    speaker_shape = (
        1.0
        + 2.2 * _gauss(harm_hz, spec.resonances[0], 150.0)
        + 1.6 * _gauss(harm_hz, spec.resonances[1], 200.0)
    ) / ((1.0 + harm_hz / (0.9 * spec.resonances[0])) * (1.0 + (h / 22.0) ** 2))
    amps = np.empty((n_harm, len(tokens)))
    for j, tok in enumerate(tokens):
        f1, f2 = token_formants(int(tok))
        tok_shape = _gauss(harm_hz, f1, 160.0) + 0.7 * _gauss(harm_hz, f2, 220.0) + 0.08
        amps[:, j] = tok_shape * speaker_shape

    # per-sample amplitudes: hold per token, then box-smooth into 10 ms ramps
    amp_time = np.repeat(amps, tok_len, axis=1)
    ramp = max(int(TOKEN_BOUNDARY_RAMP_S * sample_rate), 1)
    kernel = np.ones(ramp) / ramp
    pad = np.pad(amp_time, ((0, 0), (ramp // 2, ramp - 1 - ramp // 2)), mode="edge")
    cs = np.cumsum(pad, axis=1)
    amp_smooth = np.empty_like(amp_time)
    amp_smooth[:, :] = (cs[:, ramp - 1 :] - np.concatenate(
        [np.zeros((amp_time.shape[0], 1)), cs[:, : -ramp]], axis=1
    )) / ramp

    # amplitude arch over each token slot
    u = (np.arange(tok_len) + 0.5) / tok_len
    arch = (4.0 * u * (1.0 - u)) ** spec.env_shape
    envelope = np.tile(arch, len(tokens))

    x = np.sum(amp_smooth * np.sin(h[:, None] * phase[None, :]), axis=0) * envelope
    x = 0.7 * x / max(np.max(np.abs(x)), 1e-9)
    x = x + 3e-4 * rng.normal(size=n)

    lead = np.zeros(int(rng.uniform(0.005, 0.025) * sample_rate))
    tail = np.zeros(int(rng.uniform(0.005, 0.025) * sample_rate))
    out = np.concatenate([lead, x, tail])
    return np.clip(out, -1.0, 1.0)


@dataclass
class ManifestRecord:
    utt_id: str
    speaker_id: str
    audio: str  # path relative to the manifest directory
    tokens: str  # whitespace-separated decimal ids
    duration: float

    def token_ids(self) -> np.ndarray:
        return np.array([int(s) for s in self.tokens.split()], dtype=np.int64)


@dataclass
class Manifest:
    header: dict
    records: list[ManifestRecord]
    root: Path  # directory the audio paths are relative to

    @property
    def speakers(self) -> list[str]:
        seen = dict.fromkeys(r.speaker_id for r in self.records)
        return list(seen)

    def by_speaker(self) -> dict[str, list[ManifestRecord]]:
        out: dict[str, list[ManifestRecord]] = {}
        for r in self.records:
            out.setdefault(r.speaker_id, []).append(r)
        return out

    def audio_path(self, rec: ManifestRecord) -> Path:
        return self.root / rec.audio

    def speaker_specs(self) -> list[SyntheticSpeakerSpec]:
        return [SyntheticSpeakerSpec.from_dict(d) for d in self.header.get("speakers", [])]


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({HEADER_KEY: manifest.header}, sort_keys=True) + "\n")
        for r in manifest.records:
            f.write(json.dumps(dataclasses.asdict(r), sort_keys=True) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    if not lines:
        raise DataError(f"{path}: empty manifest")
    first = json.loads(lines[0])
    if HEADER_KEY not in first:
        raise DataError(f"{path}: first line must be the {HEADER_KEY} record")
    records = [ManifestRecord(**json.loads(ln)) for ln in lines[1:] if ln.strip()]
    return Manifest(header=first[HEADER_KEY], records=records, root=path.parent)


def default_stft_config(profile: str = "toy") -> dsp.StftConfig:
    n_mels = 40 if profile == "toy" else 80
    return dsp.StftConfig(n_mels=n_mels)


def generate_corpus(
    out_dir,
    n_speakers: int = 4,
    utts_per_speaker: int = 80,
    alphabet_size: int = 32,
    seed: int = 7,
    speakers: list[SyntheticSpeakerSpec] | None = None,
    stft: dsp.StftConfig | None = None,
) -> Manifest:
    """Render a corpus to out_dir/wav and write out_dir/manifest.jsonl.

    Mel normalization stats (over silence-trimmed audio) go into the manifest
    header so every later stage shares one feature space.
    """
    if n_speakers < 2 and speakers is None:
        raise DataError("need at least 2 speakers")
    if utts_per_speaker < 1:
        raise DataError("need at least 1 utterance per speaker")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    try:
        os.makedirs(wav_dir, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {wav_dir}: {e}") from e
    specs = speakers if speakers is not None else default_speaker_specs(n_speakers, seed)
    cfg = stft or default_stft_config()

    records = []
    mels = []
    for si, spec in enumerate(specs):
        for ui in range(utts_per_speaker):
            rng = np.random.default_rng([seed, si, ui])
            n_tok = int(rng.integers(MIN_TOKENS, MAX_TOKENS + 1))
            tokens = rng.integers(0, alphabet_size, size=n_tok)
            samples = render_utterance(spec, tokens, rng)
            utt_id = f"{spec.speaker_id}_{ui:04d}"
            rel = f"wav/{utt_id}.wav"
            wav = dsp.Waveform(samples)
            dsp.save_wav(wav, out_dir / rel)
            trimmed, _ = dsp.trim_silence(dsp.load_wav(out_dir / rel))
            mels.append(dsp.mel_spectrogram(trimmed, cfg))
            records.append(
                ManifestRecord(
                    utt_id=utt_id,
                    speaker_id=spec.speaker_id,
                    audio=rel,
                    tokens=" ".join(str(int(t)) for t in tokens),
                    duration=round(len(samples) / dsp.SAMPLE_RATE, 6),
                )
            )
    mean, std = dsp.mel_stats(mels)
    stft_dict = dataclasses.asdict(cfg)
    header = {
        "sample_rate": dsp.SAMPLE_RATE,
        "alphabet_size": alphabet_size,
        "seed": seed,
        "stft": stft_dict,
        "stft_fingerprint": fingerprint(stft_dict),
        "trim": {"threshold_db": -40.0, "pad_ms": 50.0},
        "mel_mean": [round(float(v), 8) for v in mean],
        "mel_std": [round(float(v), 8) for v in std],
        "speakers": [s.to_dict() for s in specs],
    }
    manifest = Manifest(header=header, records=records, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def validate(manifest: Manifest) -> list[str]:
    """Returns a list of problems; empty means the manifest is sound."""
    problems = []
    seen = set()
    alphabet = manifest.header.get("alphabet_size")
    for r in manifest.records:
        if r.utt_id in seen:
            problems.append(f"duplicate utt_id: {r.utt_id}")
        seen.add(r.utt_id)
        if not manifest.audio_path(r).exists():
            problems.append(f"missing audio file: {r.audio}")
        if r.duration <= 0:
            problems.append(f"non-positive duration: {r.utt_id}")
        try:
            ids = r.token_ids()
        except ValueError:
            problems.append(f"unparsable tokens: {r.utt_id}")
            continue
        if len(ids) == 0:
            problems.append(f"empty token sequence: {r.utt_id}")
        elif alphabet is not None and (ids.min() < 0 or ids.max() >= alphabet):
            problems.append(f"token outside alphabet [0, {alphabet}): {r.utt_id}")
    return problems


def split(manifest: Manifest, train_ratio: float, seed: int) -> tuple[Manifest, Manifest]:
    """Stratified per speaker, deterministic in seed."""
    if not (0.0 < train_ratio < 1.0):
        raise DataError("train_ratio must be in (0, 1)")
    rng = np.random.default_rng([seed, 0x5917])
    train, dev = [], []
    for speaker_id, recs in sorted(manifest.by_speaker().items()):
        perm = rng.permutation(len(recs))
        k = int(round(train_ratio * len(recs)))
        chosen = set(perm[:k].tolist())
        for i, r in enumerate(recs):
            (train if i in chosen else dev).append(r)
    mk = lambda recs: Manifest(header=manifest.header, records=recs, root=manifest.root)
    return mk(train), mk(dev)
