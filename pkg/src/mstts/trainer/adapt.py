"""Adapting trained models to a new speaker from a small enrollment set.

Two modes.  "full" fine-tunes every parameter at a small learning rate;
"speaker_only" freezes the networks and trains just the speaker model (the
encoder, or the table rows).  Either way the vocoder's speaker table gets a
fresh mean-initialized row for each new speaker.

Similarity before and after is judged by a frozen copy of the base run's
speaker encoder, so the yardstick cannot drift while the model under it
trains.  Mel normalization stats are inherited from the base checkpoint,
never recomputed from the enrollment data.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DataError, DivergenceError
from ..numerics import Tensor
from ..numerics.optim import AdamState, NonFiniteGradient, adam_step, clip_global_norm
from ..numerics.tensor import backward
from ..speaker import SpeakerEncoder
from ..spectrum import frame_mask_for, spectrum_loss, stop_targets_for
from ..vocoder import upsample_conditioning
from .checkpoint import param_diff, save_checkpoint
from .evaluate import EvalReport, evaluate_spectrum
from .features import (
    length_buckets,
    load_features,
    pick_spectrum_batch,
    pick_vocoder_batch,
)
from .loop import (
    _check_finite,
    _rng,
    restore_spectrum_bundle,
    restore_vocoder_bundle,
)

_TAG_ADAPT_BATCH = 201
_TAG_ADAPT_DROPOUT = 202
_TAG_ADAPT_VOC = 203

MIN_UTTERANCES = 50


@dataclass
class AdaptationJob:
    spectrum_ckpt: str
    manifest: object  # Manifest with the new speaker's utterances
    mode: str = "speaker_only"  # speaker_only | full
    vocoder_ckpt: str | None = None
    steps: int = 200
    vocoder_steps: int | None = None  # defaults to ``steps``
    lr: float | None = None  # per-mode default when unset
    batch_size: int = 4
    excerpt_frames: int = 8
    grad_clip: float = 1.0
    l2_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("speaker_only", "full"):
            raise ConfigError(f"unknown adaptation mode {self.mode!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")

    @property
    def effective_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-5 if self.mode == "full" else 1e-4


@dataclass
class AdaptationResult:
    spectrum_ckpt: Path
    vocoder_ckpt: Path | None
    report: dict
    pre_eval: EvalReport
    post_eval: EvalReport
    rows: list = field(default_factory=list)  # per-utterance before/after


def _trainable_subset(params: dict, mode: str) -> dict:
    if mode == "full":
        return params
    keep = ("spk_enc.", "spk_table.", "voc_table.")
    sub = {k: v for k, v in params.items() if k.startswith(keep)}
    if not sub:
        raise ConfigError("no speaker-model parameters found to adapt")
    return sub


def _frozen_judge(bundle) -> SpeakerEncoder:
    if bundle.speaker_mode != "encoder":
        raise DataError("adaptation metrics need an encoder-based base model")
    from ..dsp import StftConfig

    n_mels = StftConfig(**bundle.stft).n_mels
    judge = SpeakerEncoder(np.random.default_rng(0), n_mels)
    src = bundle.speaker_model.params()
    for name, p in judge.params().items():
        p.data[...] = src[name].data
    return judge


def _reseed_ema(ema, params: dict) -> None:
    """Table growth changes a shadow shape; restart those entries."""
    if ema is None:
        return
    for name, p in params.items():
        s = ema.shadow.get(name)
        if s is None or s.shape != p.data.shape:
            ema.shadow[name] = p.data.copy()


def adapt(job: AdaptationJob, out_dir) -> AdaptationResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    bundle, base_ckpt = restore_spectrum_bundle(job.spectrum_ckpt)
    features = load_features(job.manifest,
                             stats=(bundle.mel_mean, bundle.mel_std),
                             with_samples=job.vocoder_ckpt is not None)
    # the header roster may be wider than the enrollment set; go by records
    new_speakers = sorted({u.speaker_id for u in features.utterances})
    n_utts = len(features.utterances)
    warned = n_utts < MIN_UTTERANCES
    if warned:
        warnings.warn(
            f"adaptation set has {n_utts} utterances; below {MIN_UTTERANCES} "
            "results degrade noticeably", stacklevel=2)

    judge = _frozen_judge(bundle)
    pre_eval = evaluate_spectrum(bundle, None, seed=job.seed, judge=judge,
                                 features=features)

    params = bundle.params()
    base_snapshot = {k: p.data.copy() for k, p in params.items()}
    trainable = _trainable_subset(params, job.mode)
    adam = AdamState()
    lr = job.effective_lr
    buckets = length_buckets(features, job.batch_size)
    r = bundle.config.reduction

    for step in range(1, job.steps + 1):
        batch = pick_spectrum_batch(
            features, buckets, r, _rng(job.seed, _TAG_ADAPT_BATCH, step))
        emb = bundle.embeddings_for(batch)
        pre, post, stop, _ = bundle.predictor.predict_teacher_forced(
            batch.tokens, batch.token_lengths, Tensor(batch.mel), emb,
            _rng(job.seed, _TAG_ADAPT_DROPOUT, step))
        t_frames = batch.mel.shape[1]
        total, bd = spectrum_loss(
            pre, post, stop, Tensor(batch.mel),
            stop_targets_for(batch.frame_lengths, t_frames),
            frame_mask_for(batch.frame_lengths, t_frames),
            params=trainable, l2_weight=job.l2_weight)
        _check_finite(bd["total"], step, None)
        grads = backward(total, params=trainable)
        if job.grad_clip > 0:
            grads, _ = clip_global_norm(grads, job.grad_clip)
        try:
            adam_step(trainable, grads, adam, lr)
        except NonFiniteGradient as e:
            raise DivergenceError(f"{e} at adaptation step {step}") from e

    post_eval = evaluate_spectrum(bundle, None, seed=job.seed, judge=judge,
                                  features=features)
    changed = param_diff(base_snapshot, {k: p.data for k, p in params.items()})

    extra = dict(base_ckpt.extra)
    extra["adapted_from"] = str(job.spectrum_ckpt)
    extra["adaptation_mode"] = job.mode
    spec_path = out_dir / "spectrum_adapted.ckpt"
    base_ckpt.params = {
        **{k: p.data for k, p in params.items()},
        "norm.mel_mean": np.asarray(bundle.mel_mean, dtype=np.float32),
        "norm.mel_std": np.asarray(bundle.mel_std, dtype=np.float32),
    }
    base_ckpt.step = base_ckpt.step + job.steps
    base_ckpt.extra = extra
    base_ckpt.adam = None
    save_checkpoint(spec_path, base_ckpt)

    voc_path = None
    voc_changed = []
    if job.vocoder_ckpt is not None:
        voc_path, voc_changed = _adapt_vocoder(job, features, new_speakers, out_dir)

    rows = [
        {"utt_id": a["utt_id"], "speaker_id": a["speaker_id"],
         "pre_similarity": a["similarity"], "post_similarity": b["similarity"]}
        for a, b in zip(pre_eval.rows, post_eval.rows)
    ]
    with open(out_dir / "adaptation_report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["utt_id", "speaker_id",
                                          "pre_similarity", "post_similarity"])
        w.writeheader()
        w.writerows(rows)

    report = {
        "mode": job.mode,
        "lr": lr,
        "steps": job.steps,
        "n_utterances": n_utts,
        "new_speakers": new_speakers,
        "low_data_warning": warned,
        "pre_similarity": pre_eval.mean_similarity,
        "post_similarity": post_eval.mean_similarity,
        "changed_spectrum_params": changed,
        "changed_vocoder_params": voc_changed,
    }
    return AdaptationResult(
        spectrum_ckpt=spec_path, vocoder_ckpt=voc_path, report=report,
        pre_eval=pre_eval, post_eval=post_eval, rows=rows)


def _adapt_vocoder(job: AdaptationJob, features, new_speakers, out_dir: Path):
    bundle, base_ckpt = restore_vocoder_bundle(job.vocoder_ckpt)
    for spk in new_speakers:
        if spk in bundle.table.index:
            raise DataError(f"speaker {spk!r} already in the vocoder table")
        bundle.table.add_speaker(spk)
    params = bundle.params()
    base_snapshot = {k: p.data.copy() for k, p in params.items()}
    trainable = _trainable_subset(params, job.mode)
    _reseed_ema(bundle.ema, params)
    adam = AdamState()
    lr = job.effective_lr
    hop = bundle.config.hop
    steps = job.steps if job.vocoder_steps is None else job.vocoder_steps

    from ..numerics.optim import ema_update

    for step in range(1, steps + 1):
        rng = _rng(job.seed, _TAG_ADAPT_VOC, step)
        batch = pick_vocoder_batch(features, job.batch_size, job.excerpt_frames,
                                   hop, rng)
        emb = bundle.table.lookup_many(batch.speaker_ids)
        cond = upsample_conditioning(batch.mel, emb, hop)
        _, nll = bundle.net.forward_teacher_forced(batch.samples, cond)
        _check_finite(float(nll.data), step, None)
        grads = backward(nll, params=trainable)
        try:
            adam_step(trainable, grads, adam, lr)
        except NonFiniteGradient as e:
            raise DivergenceError(f"{e} at vocoder adaptation step {step}") from e
        if bundle.ema is not None:
            # frozen weights keep their frozen shadow; only the trainable
            # subset's average moves
            ema_update(trainable, bundle.ema)

    changed = param_diff(base_snapshot, {k: p.data for k, p in params.items()})
    extra = dict(base_ckpt.extra)
    extra["adapted_from"] = str(job.vocoder_ckpt)
    extra["adaptation_mode"] = job.mode
    path = out_dir / "vocoder_adapted.ckpt"
    base_ckpt.params = {
        **{k: p.data for k, p in params.items()},
        "norm.mel_mean": np.asarray(bundle.mel_mean, dtype=np.float32),
        "norm.mel_std": np.asarray(bundle.mel_std, dtype=np.float32),
    }
    base_ckpt.step = base_ckpt.step + steps
    base_ckpt.extra = extra
    base_ckpt.speaker_ids = list(bundle.table.ids)
    base_ckpt.adam = None
    base_ckpt.ema = bundle.ema
    save_checkpoint(path, base_ckpt)
    return path, changed
