"""Training loops for the two networks.

Determinism scheme: every stochastic choice at step k is drawn from a
generator seeded [seed, tag, k], so a resumed run replays the identical
batch and dropout sequence without replaying history.  Learning rate comes
from the schedule closed form each step and is logged next to the loss,
which lets tests check the curve against lr_at directly.

A non-finite loss or gradient aborts training; checkpoints already on disk
are left untouched, so the newest one is the last good state.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..canon import fingerprint
from ..corpus import Manifest
from ..errors import ConfigError, DataError, DivergenceError
from ..numerics import Tensor
from ..numerics.optim import (
    AdamState,
    EmaState,
    LrSchedule,
    NonFiniteGradient,
    adam_step,
    clip_global_norm,
    ema_init,
    ema_update,
    lr_at,
)
from ..numerics.tensor import backward
from ..speaker import SpeakerEncoder, SpeakerTable
from ..spectrum import (
    SpectrumConfig,
    SpectrumPredictor,
    frame_mask_for,
    spectrum_loss,
    stop_targets_for,
)
from ..vocoder import VocoderConfig, VocoderNet, VocoderSpeakerTable, upsample_conditioning
from .checkpoint import Checkpoint, assign_params, load_checkpoint, save_checkpoint
from .features import (
    FeatureSet,
    length_buckets,
    load_features,
    pick_spectrum_batch,
    pick_vocoder_batch,
)

# rng stream tags; arbitrary but fixed
_TAG_INIT = 101
_TAG_BATCH = 102
_TAG_DROPOUT = 103
_TAG_PRETRAIN = 104


@dataclass
class TrainConfig:
    profile: str = "toy"
    batch_size: int = 8
    max_steps: int = 2000
    schedule: LrSchedule | None = None  # per-model default filled in
    l2_weight: float = 1e-6
    ema_decay: float = 0.9999
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 500
    speaker_model: str = "encoder"  # encoder | table
    excerpt_frames: int = 8  # vocoder training window
    grad_clip: float = 1.0
    pretrain_steps: int = 0  # optional encoder classification warm-up

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.max_steps < 1:
            raise ConfigError("max steps must be >= 1")
        if self.profile not in ("toy", "full"):
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.speaker_model not in ("encoder", "table"):
            raise ConfigError(f"unknown speaker model {self.speaker_model!r}")


def spectrum_config_for(profile: str, alphabet_size: int, n_mels: int) -> SpectrumConfig:
    if profile == "toy":
        return SpectrumConfig(alphabet_size=alphabet_size, n_mels=n_mels)
    return SpectrumConfig(
        alphabet_size=alphabet_size, n_mels=n_mels,
        enc_conv_channels=512, enc_rnn_width=256, attn_dim=128,
        prenet_width=256, dec_rnn_width=1024, postnet_channels=512,
    )


def vocoder_config_for(profile: str, n_mels: int, hop: int) -> VocoderConfig:
    if profile == "toy":
        return VocoderConfig(n_mels=n_mels, hop=hop)
    return VocoderConfig(n_mels=n_mels, hop=hop, residual_channels=64, skip_channels=128)


def spectrum_schedule() -> LrSchedule:
    return LrSchedule()


def vocoder_schedule() -> LrSchedule:
    # constant by construction: rate 1 with the floor at the initial value
    return LrSchedule(initial_lr=1e-4, min_lr=1e-4, decay_rate=1.0)


def _rng(seed: int, tag: int, step: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([seed, tag, step]))


def _write_rows(path: Path, rows: list, fieldnames: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow(r)


@dataclass
class SpectrumBundle:
    """Predictor plus its speaker model, as trained together."""

    predictor: SpectrumPredictor
    speaker_model: object  # SpeakerEncoder | SpeakerTable
    speaker_mode: str
    config: SpectrumConfig
    stft: dict
    mel_mean: np.ndarray
    mel_std: np.ndarray
    speaker_ids: list

    def params(self) -> dict:
        return {**self.predictor.params(), **self.speaker_model.params()}

    def fingerprint_payload(self) -> dict:
        return {
            "kind": "spectrum",
            "config": asdict(self.config),
            "speaker_model": self.speaker_mode,
            "stft": self.stft,
        }

    def embeddings_for(self, batch) -> Tensor:
        if self.speaker_mode == "encoder":
            return self.speaker_model(Tensor(batch.mel), batch.frame_lengths)
        return self.speaker_model.lookup_many(batch.speaker_ids)


def build_spectrum_bundle(features: FeatureSet, cfg: TrainConfig) -> SpectrumBundle:
    scfg = spectrum_config_for(cfg.profile, features.alphabet_size, features.stft.n_mels)
    rng = _rng(cfg.seed, _TAG_INIT)
    predictor = SpectrumPredictor(rng, scfg)
    if cfg.speaker_model == "encoder":
        speaker_model = SpeakerEncoder(rng, features.stft.n_mels)
    else:
        speaker_model = SpeakerTable(sorted(features.speakers), rng)
    return SpectrumBundle(
        predictor=predictor,
        speaker_model=speaker_model,
        speaker_mode=cfg.speaker_model,
        config=scfg,
        stft=asdict(features.stft),
        mel_mean=features.mel_mean,
        mel_std=features.mel_std,
        speaker_ids=sorted(features.speakers),
    )


@dataclass
class VocoderBundle:
    net: VocoderNet
    table: VocoderSpeakerTable
    config: VocoderConfig
    stft: dict
    mel_mean: np.ndarray
    mel_std: np.ndarray
    ema: EmaState | None = None

    def params(self) -> dict:
        return {**self.net.params(), **self.table.params()}

    def fingerprint_payload(self) -> dict:
        return {"kind": "vocoder", "config": asdict(self.config), "stft": self.stft}


def build_vocoder_bundle(features: FeatureSet, cfg: TrainConfig) -> VocoderBundle:
    vcfg = vocoder_config_for(cfg.profile, features.stft.n_mels, features.stft.hop_length)
    rng = _rng(cfg.seed, _TAG_INIT)
    net = VocoderNet(rng, vcfg)
    table = VocoderSpeakerTable(sorted(features.speakers), rng)
    return VocoderBundle(
        net=net, table=table, config=vcfg, stft=asdict(features.stft),
        mel_mean=features.mel_mean, mel_std=features.mel_std,
    )


def _norm_blobs(mean, std) -> dict:
    return {
        "norm.mel_mean": np.asarray(mean, dtype=np.float32),
        "norm.mel_std": np.asarray(std, dtype=np.float32),
    }


def split_norm(ckpt_params: dict) -> tuple:
    """Separate model parameters from the frozen normalization stats."""
    model = {k: v for k, v in ckpt_params.items() if not k.startswith("norm.")}
    mean = ckpt_params.get("norm.mel_mean")
    std = ckpt_params.get("norm.mel_std")
    return model, mean, std


def _save(path, kind, fp, step, params, speaker_ids, adam, ema, extra, mean, std, seed):
    ckpt = Checkpoint(
        kind=kind,
        config_fingerprint=fp,
        step=step,
        params={**{k: p.data for k, p in params.items()}, **_norm_blobs(mean, std)},
        rng_state={"scheme": "per-step", "seed": int(seed)},
        speaker_ids=list(speaker_ids),
        adam=adam,
        ema=ema,
        extra=extra,
    )
    save_checkpoint(path, ckpt)


def _check_finite(value: float, step: int, last_good: Path | None):
    if np.isfinite(value):
        return
    kept = f"; last good checkpoint: {last_good}" if last_good else ""
    raise DivergenceError(f"non-finite loss at step {step}{kept}")


def _pretrain_encoder(features: FeatureSet, encoder, cfg: TrainConfig, buckets) -> None:
    """Optional warm-up: speaker classification on encoder embeddings."""
    from ..numerics import ops
    from ..numerics.layers import Linear

    speakers = sorted(features.speakers)
    idx = {s: i for i, s in enumerate(speakers)}
    head = Linear(_rng(cfg.seed, _TAG_PRETRAIN), 128, len(speakers))
    params = {**encoder.params(), **head.params("pretrain_head")}
    state = AdamState()
    for step in range(1, cfg.pretrain_steps + 1):
        rng = _rng(cfg.seed, _TAG_PRETRAIN, step)
        batch = pick_spectrum_batch(features, buckets, 2, rng)
        emb = encoder(Tensor(batch.mel), batch.frame_lengths)
        logits = head(emb)
        onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
        onehot[np.arange(len(batch.speaker_ids)),
               [idx[s] for s in batch.speaker_ids]] = 1.0
        lse = ops.logsumexp(logits, axis=-1)
        picked = ops.sum_(ops.mul(logits, onehot), axis=-1)
        loss = ops.mean(ops.sub(lse, picked))
        grads = backward(loss, params=params)
        adam_step(params, grads, state, 1e-3)


def train_spectrum(manifest, cfg: TrainConfig, out_dir,
                   resume_from=None) -> tuple:
    """Returns (bundle, final checkpoint path, loss rows)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    features = load_features(manifest)
    bundle = build_spectrum_bundle(features, cfg)
    params = bundle.params()
    schedule = cfg.schedule or spectrum_schedule()
    fp = fingerprint(bundle.fingerprint_payload())
    extra = {
        "spectrum_config": asdict(bundle.config),
        "speaker_model": bundle.speaker_mode,
        "stft": bundle.stft,
        "alphabet_size": features.alphabet_size,
        "profile": cfg.profile,
    }
    adam = AdamState()
    start_step = 0
    last_good = None
    if resume_from is not None:
        loaded = load_checkpoint(resume_from, expect_fingerprint=fp)
        model_params, _, _ = split_norm(loaded.params)
        assign_params(params, model_params)
        adam = loaded.adam or AdamState()
        start_step = loaded.step
        last_good = Path(resume_from)
    elif cfg.pretrain_steps > 0 and cfg.speaker_model == "encoder":
        _pretrain_encoder(features, bundle.speaker_model, cfg,
                          length_buckets(features, 2))

    buckets = length_buckets(features, cfg.batch_size)
    r = bundle.config.reduction
    rows = []
    loss_csv = out_dir / "loss_spectrum.csv"
    fields = ["step", "lr", "total", "mse_pre", "mse_post", "stop", "l2"]

    for step in range(start_step + 1, cfg.max_steps + 1):
        batch = pick_spectrum_batch(features, buckets, r, _rng(cfg.seed, _TAG_BATCH, step))
        emb = bundle.embeddings_for(batch)
        pre, post, stop, _ = bundle.predictor.predict_teacher_forced(
            batch.tokens, batch.token_lengths, Tensor(batch.mel), emb,
            _rng(cfg.seed, _TAG_DROPOUT, step),
        )
        t_frames = batch.mel.shape[1]
        total, bd = spectrum_loss(
            pre, post, stop, Tensor(batch.mel),
            stop_targets_for(batch.frame_lengths, t_frames),
            frame_mask_for(batch.frame_lengths, t_frames),
            params=params, l2_weight=cfg.l2_weight,
        )
        _check_finite(bd["total"], step, last_good)
        grads = backward(total, params=params)
        if cfg.grad_clip > 0:
            grads, _ = clip_global_norm(grads, cfg.grad_clip)
        lr = lr_at(step, schedule)
        try:
            adam_step(params, grads, adam, lr)
        except NonFiniteGradient as e:
            kept = f"; last good checkpoint: {last_good}" if last_good else ""
            raise DivergenceError(f"{e} at step {step}{kept}") from e
        rows.append({"step": step, "lr": lr, **bd})
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.max_steps:
            path = out_dir / f"spectrum_step{step:06d}.ckpt"
            _save(path, "spectrum", fp, step, params, bundle.speaker_ids, adam,
                  None, extra, bundle.mel_mean, bundle.mel_std, cfg.seed)
            last_good = path
    final = out_dir / "spectrum_final.ckpt"
    _save(final, "spectrum", fp, cfg.max_steps, params, bundle.speaker_ids, adam,
          None, extra, bundle.mel_mean, bundle.mel_std, cfg.seed)
    _write_rows(loss_csv, rows, fields)
    return bundle, final, rows


def train_vocoder(manifest, cfg: TrainConfig, out_dir, resume_from=None) -> tuple:
    """Returns (bundle, final checkpoint path, loss rows)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    features = load_features(manifest, with_samples=True)
    bundle = build_vocoder_bundle(features, cfg)
    params = bundle.params()
    schedule = cfg.schedule or vocoder_schedule()
    fp = fingerprint(bundle.fingerprint_payload())
    extra = {
        "vocoder_config": asdict(bundle.config),
        "stft": bundle.stft,
        "profile": cfg.profile,
    }
    adam = AdamState()
    ema = ema_init(params, decay=cfg.ema_decay)
    start_step = 0
    last_good = None
    if resume_from is not None:
        loaded = load_checkpoint(resume_from, expect_fingerprint=fp)
        model_params, _, _ = split_norm(loaded.params)
        assign_params(params, model_params)
        adam = loaded.adam or AdamState()
        if loaded.ema is not None:
            ema = loaded.ema
        start_step = loaded.step
        last_good = Path(resume_from)

    hop = bundle.config.hop
    rows = []
    fields = ["step", "lr", "nll"]
    for step in range(start_step + 1, cfg.max_steps + 1):
        rng = _rng(cfg.seed, _TAG_BATCH, step)
        batch = pick_vocoder_batch(features, cfg.batch_size, cfg.excerpt_frames, hop, rng)
        emb = bundle.table.lookup_many(batch.speaker_ids)
        cond = upsample_conditioning(batch.mel, emb, hop)
        _, nll = bundle.net.forward_teacher_forced(batch.samples, cond)
        _check_finite(float(nll.data), step, last_good)
        grads = backward(nll, params=params)
        lr = lr_at(step, schedule)
        try:
            adam_step(params, grads, adam, lr)
        except NonFiniteGradient as e:
            kept = f"; last good checkpoint: {last_good}" if last_good else ""
            raise DivergenceError(f"{e} at step {step}{kept}") from e
        ema_update(params, ema)
        rows.append({"step": step, "lr": lr, "nll": float(nll.data)})
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.max_steps:
            path = out_dir / f"vocoder_step{step:06d}.ckpt"
            _save(path, "vocoder", fp, step, params, bundle.table.ids, adam,
                  ema, extra, bundle.mel_mean, bundle.mel_std, cfg.seed)
            last_good = path
    bundle.ema = ema
    final = out_dir / "vocoder_final.ckpt"
    _save(final, "vocoder", fp, cfg.max_steps, params, bundle.table.ids, adam,
          ema, extra, bundle.mel_mean, bundle.mel_std, cfg.seed)
    _write_rows(out_dir / "loss_vocoder.csv", rows, fields)
    return bundle, final, rows


def restore_spectrum_bundle(ckpt_path, override_fingerprint: bool = False):
    """Rebuild a SpectrumBundle from a checkpoint; returns (bundle, ckpt)."""
    from ..dsp import StftConfig

    ckpt = load_checkpoint(ckpt_path)
    if ckpt.kind != "spectrum":
        raise ConfigError(f"{ckpt_path} holds a {ckpt.kind} model, expected spectrum")
    scfg = SpectrumConfig(**ckpt.extra["spectrum_config"])
    mode = ckpt.extra["speaker_model"]
    rng = np.random.default_rng(0)
    predictor = SpectrumPredictor(rng, scfg)
    stft = StftConfig(**ckpt.extra["stft"])
    if mode == "encoder":
        speaker_model = SpeakerEncoder(rng, stft.n_mels)
    else:
        speaker_model = SpeakerTable(list(ckpt.speaker_ids), rng)
    model_params, mean, std = split_norm(ckpt.params)
    bundle = SpectrumBundle(
        predictor=predictor, speaker_model=speaker_model, speaker_mode=mode,
        config=scfg, stft=ckpt.extra["stft"], mel_mean=mean, mel_std=std,
        speaker_ids=list(ckpt.speaker_ids),
    )
    assign_params(bundle.params(), model_params)
    return bundle, ckpt


def restore_vocoder_bundle(ckpt_path):
    """Rebuild a VocoderBundle from a checkpoint; returns (bundle, ckpt)."""
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.kind != "vocoder":
        raise ConfigError(f"{ckpt_path} holds a {ckpt.kind} model, expected vocoder")
    vcfg = VocoderConfig(**ckpt.extra["vocoder_config"])
    rng = np.random.default_rng(0)
    net = VocoderNet(rng, vcfg)
    table = VocoderSpeakerTable(list(ckpt.speaker_ids), rng)
    model_params, mean, std = split_norm(ckpt.params)
    bundle = VocoderBundle(
        net=net, table=table, config=vcfg, stft=ckpt.extra["stft"],
        mel_mean=mean, mel_std=std, ema=ckpt.ema,
    )
    assign_params(bundle.params(), model_params)
    return bundle, ckpt


def apply_ema(bundle: VocoderBundle) -> None:
    """Overwrite live weights with the EMA shadow (synthesis default)."""
    if bundle.ema is None or not bundle.ema.shadow:
        return
    for name, p in bundle.params().items():
        shadow = bundle.ema.shadow.get(name)
        if shadow is not None:
            p.data[...] = shadow.astype(p.data.dtype)


def subset_manifest(manifest, fraction: float, seed: int):
    """Per-speaker prefix of a seeded permutation; original record order is
    preserved so fraction 1.0 reproduces the input manifest exactly."""
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.Generator(np.random.PCG64([seed, 0x5CA1E]))
    keep = set()
    groups = {}
    for i, rec in enumerate(manifest.records):
        groups.setdefault(rec.speaker_id, []).append(i)
    for spk in sorted(groups):
        idxs = groups[spk]
        n = max(1, int(round(fraction * len(idxs))))
        perm = rng.permutation(len(idxs))
        keep.update(idxs[j] for j in perm[:n])
    records = [rec for i, rec in enumerate(manifest.records) if i in keep]
    if not records:
        raise DataError(f"fraction {fraction} leaves an empty training set")
    return Manifest(header=manifest.header, records=records, root=manifest.root)


def data_scaling_run(manifest, test_manifest, fractions, cfg: TrainConfig,
                     out_dir) -> list:
    """Train per fraction, evaluate mel distance on the shared test set,
    return CSV rows (also written to scaling.csv)."""
    from .evaluate import evaluate_spectrum

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for frac in fractions:
        sub = subset_manifest(manifest, frac, cfg.seed)
        run_dir = out_dir / f"fraction_{frac:g}"
        bundle, ckpt_path, loss_rows = train_spectrum(sub, cfg, run_dir)
        report = evaluate_spectrum(bundle, test_manifest, seed=cfg.seed)
        rows.append(
            {
                "fraction": frac,
                "n_train": len(sub.records),
                "steps": cfg.max_steps,
                "mel_distance": report.mean_mel_distance,
                "similarity": report.mean_similarity,
                "teacher_mse": report.mean_teacher_mse,
                "checkpoint": str(ckpt_path),
            }
        )
    _write_rows(out_dir / "scaling.csv", rows,
                ["fraction", "n_train", "steps", "mel_distance", "similarity",
                 "teacher_mse", "checkpoint"])
    return rows
