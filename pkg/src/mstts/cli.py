"""Command-line interface.

Commands print one summary line per artifact they write; failures exit
nonzero with a single machine-parsable line ``error: <Type>: <message>`` on
stderr.  Usage mistakes exit 2 with click's usage text.  Every command that
creates a run directory stamps it with the resolved config, the package
version, and the seed.
"""

from __future__ import annotations

import functools
import json
import os
from pathlib import Path

import click
import numpy as np

from . import config as cfgmod
from . import corpus as corpusmod
from . import dsp, report
from .errors import ConfigError, DataError, MsttsError
from .numerics import Tensor, no_grad
from .speaker import encode_speaker, project_2d
from .trainer import (
    TrainConfig,
    load_features,
    train_spectrum,
    train_vocoder,
)
from .trainer.adapt import AdaptationJob, adapt as run_adapt
from .trainer.evaluate import evaluate_spectrum, EvalReport
from .trainer.loop import (
    apply_ema,
    data_scaling_run,
    restore_spectrum_bundle,
    restore_vocoder_bundle,
)


def _handled(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except MsttsError as e:
            click.echo(f"error: {type(e).__name__}: {e}", err=True)
            raise SystemExit(1)

    return wrapper


def _default_out(name: str) -> Path:
    root = os.environ.get("MSTTS_DATA_ROOT", ".")
    return Path(root) / name


def _read_manifest(path) -> corpusmod.Manifest:
    return corpusmod.read_manifest(path)


def _train_cfg(config_path, **flags) -> TrainConfig:
    tree = cfgmod.read_config_file(config_path) if config_path else {}
    return cfgmod.resolve_train_config(tree, **flags)


@click.group()
@click.version_option(version=cfgmod.version_string(), prog_name="mstts")
def main():
    """Multi-speaker text-to-speech: corpus, training, adaptation, synthesis."""


# ------------------------------------------------------------------- corpus


@main.group("corpus")
def corpus_group():
    """Synthetic corpus tools."""


@corpus_group.command("generate")
@click.option("--speakers", "n_speakers", default=4, show_default=True)
@click.option("--utts", "utts_per_speaker", default=80, show_default=True)
@click.option("--alphabet", "alphabet_size", default=32, show_default=True)
@click.option("--seed", default=7, show_default=True)
@click.option("--profile", default="toy", type=click.Choice(["toy", "full"]))
@click.option("-o", "--out", "out_dir", type=click.Path(path_type=Path),
              default=None, help="Output directory [default: $MSTTS_DATA_ROOT/corpus]")
@_handled
def corpus_generate(n_speakers, utts_per_speaker, alphabet_size, seed, profile, out_dir):
    """Render a deterministic synthetic corpus with a manifest."""
    out_dir = out_dir or _default_out("corpus")
    man = corpusmod.generate_corpus(
        out_dir, n_speakers=n_speakers, utts_per_speaker=utts_per_speaker,
        alphabet_size=alphabet_size, seed=seed,
        stft=corpusmod.default_stft_config(profile),
    )
    cfgmod.write_run_stamp(out_dir, "corpus generate", seed, {
        "n_speakers": n_speakers, "utts_per_speaker": utts_per_speaker,
        "alphabet_size": alphabet_size, "profile": profile,
    })
    click.echo(f"wrote {len(man.records)} utterances to {out_dir / 'manifest.jsonl'}")


@corpus_group.command("validate")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(path_type=Path))
@_handled
def corpus_validate(manifest_path):
    """Check audio files and manifest invariants; nonzero exit on problems."""
    man = _read_manifest(manifest_path)
    problems = corpusmod.validate(man)
    for p in problems:
        click.echo(p)
    if problems:
        click.echo(f"error: DataError: {len(problems)} problem(s) found", err=True)
        raise SystemExit(1)
    click.echo(f"ok: {len(man.records)} records")


@corpus_group.command("split")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(path_type=Path))
@click.option("--train-ratio", default=0.9, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--train-out", default="train_manifest.jsonl", show_default=True)
@click.option("--test-out", default="test_manifest.jsonl", show_default=True)
@_handled
def corpus_split(manifest_path, train_ratio, seed, train_out, test_out):
    """Speaker-stratified train/test split; outputs land next to the input."""
    man = _read_manifest(manifest_path)
    train, test = corpusmod.split(man, train_ratio, seed)
    base = Path(manifest_path).parent
    corpusmod.write_manifest(train, base / train_out)
    corpusmod.write_manifest(test, base / test_out)
    click.echo(f"train: {len(train.records)} records -> {base / train_out}")
    click.echo(f"test: {len(test.records)} records -> {base / test_out}")


# -------------------------------------------------------------------- train


@main.group("train")
def train_group():
    """Model training."""


def _train_options(fn):
    for opt in reversed([
        click.option("--manifest", "manifest_path", required=True,
                     type=click.Path(path_type=Path)),
        click.option("-o", "--out", "out_dir", type=click.Path(path_type=Path),
                     default=None),
        click.option("--config", "config_path", type=click.Path(path_type=Path),
                     default=None, help="TOML run config"),
        click.option("--steps", "max_steps", type=int, default=None),
        click.option("--batch-size", type=int, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--profile", type=click.Choice(["toy", "full"]), default=None),
        click.option("--checkpoint-every", type=int, default=None),
        click.option("--resume", "resume_from", type=click.Path(path_type=Path),
                     default=None),
    ]):
        fn = opt(fn)
    return fn


@train_group.command("spectrum")
@_train_options
@click.option("--speaker-model", type=click.Choice(["encoder", "table"]),
              default=None)
@click.option("--pretrain-steps", type=int, default=None)
@_handled
def train_spectrum_cmd(manifest_path, out_dir, config_path, max_steps, batch_size,
                       seed, profile, checkpoint_every, resume_from,
                       speaker_model, pretrain_steps):
    """Train the mel predictor (with its speaker model) on a manifest."""
    out_dir = out_dir or _default_out("spectrum_run")
    cfg = _train_cfg(config_path, max_steps=max_steps, batch_size=batch_size,
                     seed=seed, profile=profile, checkpoint_every=checkpoint_every,
                     speaker_model=speaker_model, pretrain_steps=pretrain_steps)
    cfgmod.write_run_stamp(out_dir, "train spectrum", cfg.seed,
                           cfgmod.train_config_dict(cfg))
    man = _read_manifest(manifest_path)
    _, ckpt_path, rows = train_spectrum(man, cfg, out_dir,
                                        resume_from=resume_from)
    report.loss_figure(rows, Path(out_dir) / "loss_spectrum.png")
    click.echo(f"final loss {rows[-1]['total']:.4f} at step {rows[-1]['step']}")
    click.echo(f"checkpoint: {ckpt_path}")


@train_group.command("vocoder")
@_train_options
@click.option("--excerpt-frames", type=int, default=None)
@_handled
def train_vocoder_cmd(manifest_path, out_dir, config_path, max_steps, batch_size,
                      seed, profile, checkpoint_every, resume_from, excerpt_frames):
    """Train the sample-level vocoder on a manifest."""
    out_dir = out_dir or _default_out("vocoder_run")
    cfg = _train_cfg(config_path, max_steps=max_steps, batch_size=batch_size,
                     seed=seed, profile=profile, checkpoint_every=checkpoint_every,
                     excerpt_frames=excerpt_frames)
    cfgmod.write_run_stamp(out_dir, "train vocoder", cfg.seed,
                           cfgmod.train_config_dict(cfg))
    man = _read_manifest(manifest_path)
    _, ckpt_path, rows = train_vocoder(man, cfg, out_dir, resume_from=resume_from)
    report.loss_figure(rows, Path(out_dir) / "loss_vocoder.png")
    click.echo(f"final nll {rows[-1]['nll']:.4f} at step {rows[-1]['step']}")
    click.echo(f"checkpoint: {ckpt_path}")


# -------------------------------------------------------------------- adapt


@main.command("adapt")
@click.option("--spectrum", "spectrum_ckpt", required=True,
              type=click.Path(path_type=Path))
@click.option("--vocoder", "vocoder_ckpt", type=click.Path(path_type=Path),
              default=None)
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(path_type=Path))
@click.option("-o", "--out", "out_dir", type=click.Path(path_type=Path),
              default=None)
@click.option("--mode", type=click.Choice(["speaker_only", "full"]),
              default="speaker_only", show_default=True)
@click.option("--steps", type=int, default=200, show_default=True)
@click.option("--lr", type=float, default=None,
              help="Override the per-mode default learning rate")
@click.option("--batch-size", type=int, default=4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_handled
def adapt_cmd(spectrum_ckpt, vocoder_ckpt, manifest_path, out_dir, mode, steps,
              lr, batch_size, seed):
    """Fine-tune trained models on a new speaker's enrollment data."""
    out_dir = out_dir or _default_out("adaptation")
    man = _read_manifest(manifest_path)
    job = AdaptationJob(
        spectrum_ckpt=str(spectrum_ckpt), manifest=man, mode=mode,
        vocoder_ckpt=None if vocoder_ckpt is None else str(vocoder_ckpt),
        steps=steps, lr=lr, batch_size=batch_size, seed=seed,
    )
    cfgmod.write_run_stamp(out_dir, "adapt", seed, {
        "mode": mode, "steps": steps, "lr": job.effective_lr,
        "batch_size": batch_size,
    })
    res = run_adapt(job, out_dir)
    report.adaptation_figure(res.rows, Path(out_dir) / "adaptation.png")
    rep = res.report
    click.echo(
        f"similarity {rep['pre_similarity']:.4f} -> {rep['post_similarity']:.4f} "
        f"({rep['mode']}, {rep['n_utterances']} utterances)"
    )
    click.echo(f"checkpoint: {res.spectrum_ckpt}")
    if res.vocoder_ckpt is not None:
        click.echo(f"checkpoint: {res.vocoder_ckpt}")


# --------------------------------------------------------------- synthesize


def _tokens_from_string(text_tokens: str, alphabet_size: int) -> np.ndarray:
    try:
        ids = np.array([int(t) for t in text_tokens.split()], dtype=np.int64)
    except ValueError as e:
        raise DataError(f"tokens must be whitespace-separated integers: {e}") from None
    if ids.size == 0:
        raise DataError("empty token sequence")
    if ids.min() < 0 or ids.max() >= alphabet_size:
        raise DataError(
            f"token ids must lie in [0, {alphabet_size}), got "
            f"[{ids.min()}, {ids.max()}]")
    return ids


def _spectrum_embedding(bundle, speaker: str, ref_audio) -> Tensor:
    if bundle.speaker_mode == "table":
        return bundle.speaker_model.lookup_many([speaker])
    if ref_audio is None:
        raise DataError(
            f"speaker model is an encoder; pass --ref-audio with a recording "
            f"of speaker {speaker!r}")
    from .dsp import StftConfig

    stft = StftConfig(**bundle.stft)
    wav = dsp.load_wav(ref_audio)
    trimmed, _ = dsp.trim_silence(wav)
    mel = dsp.mel_spectrogram(trimmed, stft)
    norm = dsp.normalize_mel(mel, bundle.mel_mean, bundle.mel_std)
    with no_grad():
        return bundle.speaker_model(Tensor(norm[None, :, :]))


@main.command("synthesize")
@click.option("--spectrum", "spectrum_ckpt", required=True,
              type=click.Path(path_type=Path))
@click.option("--vocoder", "vocoder_ckpt", required=True,
              type=click.Path(path_type=Path))
@click.option("--text-tokens", required=True,
              help="Whitespace-separated token ids, e.g. '3 14 7'")
@click.option("--speaker", required=True)
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@click.option("--ref-audio", type=click.Path(path_type=Path), default=None,
              help="Reference recording for encoder-based speaker models")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--max-frames", type=int, default=400, show_default=True)
@click.option("--temperature", type=float, default=0.7, show_default=True)
@click.option("--ema/--no-ema", "use_ema", default=True, show_default=True,
              help="Synthesize with the vocoder's averaged weights")
@_handled
def synthesize_cmd(spectrum_ckpt, vocoder_ckpt, text_tokens, speaker, out_path,
                   ref_audio, seed, max_frames, temperature, use_ema):
    """Tokens + speaker -> mel -> waveform, written as a 16-bit WAV."""
    bundle, _ = restore_spectrum_bundle(spectrum_ckpt)
    voc, _ = restore_vocoder_bundle(vocoder_ckpt)
    if use_ema:
        apply_ema(voc)
    tokens = _tokens_from_string(text_tokens, bundle.config.alphabet_size)
    emb = _spectrum_embedding(bundle, speaker, ref_audio)
    gen_rng = np.random.Generator(np.random.PCG64([seed, 21]))
    mel, align, stopped = bundle.predictor.generate(
        tokens[None, :], emb, max_frames, gen_rng)
    voc_emb = voc.table.lookup_many([speaker])
    samples = voc.net.synthesize_fast(mel, voc_emb.data, seed=seed,
                                      temperature=temperature)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    dsp.save_wav(dsp.Waveform(np.asarray(samples, dtype=np.float64)), out_path)
    report.mel_figure(mel[0], out_path.with_suffix(".mel.png"))
    report.alignment_figure(align[0], out_path.with_suffix(".align.png"))
    note = "" if stopped else " (hit the frame cap before the stop token)"
    click.echo(f"wrote {samples.size} samples to {out_path}{note}")


# -------------------------------------------------------------------- embed


@main.group("embed")
def embed_group():
    """Speaker embedding extraction and projection."""


@embed_group.command("extract")
@click.option("--spectrum", "spectrum_ckpt", required=True,
              type=click.Path(path_type=Path))
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(path_type=Path))
@click.option("-o", "--out", "out_path", type=click.Path(path_type=Path),
              default=None, help="[default: embeddings.csv]")
@_handled
def embed_extract(spectrum_ckpt, manifest_path, out_path):
    """One 128-d embedding per utterance, as CSV."""
    out_path = Path(out_path) if out_path else Path("embeddings.csv")
    bundle, _ = restore_spectrum_bundle(spectrum_ckpt)
    man = _read_manifest(manifest_path)
    features = load_features(man, stats=(bundle.mel_mean, bundle.mel_std))
    rows = []
    for u in features.utterances:
        if bundle.speaker_mode == "encoder":
            vec = encode_speaker(u.mel, bundle.speaker_model)
        else:
            vec = bundle.speaker_model.lookup_many([u.speaker_id]).data[0]
        row = {"utt_id": u.utt_id, "speaker_id": u.speaker_id, "kind": "real"}
        row.update({f"e{i}": float(v) for i, v in enumerate(vec)})
        rows.append(row)
    fields = ["utt_id", "speaker_id", "kind"] + [f"e{i}" for i in range(128)]
    report.write_csv(out_path, rows, fields)
    click.echo(f"wrote {len(rows)} embeddings to {out_path}")


@embed_group.command("project")
@click.option("--embeddings", "emb_path", required=True,
              type=click.Path(path_type=Path))
@click.option("--method", type=click.Choice(["pca", "tsne"]), default="pca",
              show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--out", "out_dir", type=click.Path(path_type=Path),
              default=None, help="[default: projection/]")
@_handled
def embed_project(emb_path, method, seed, out_dir):
    """Project an embeddings CSV to 2-D; writes CSV plus a scatter figure."""
    import csv as csvmod

    out_dir = Path(out_dir) if out_dir else Path("projection")
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(emb_path, newline="") as f:
        rows = list(csvmod.DictReader(f))
    if not rows:
        raise DataError(f"no rows in {emb_path}")
    dims = sorted((k for k in rows[0] if k.startswith("e")),
                  key=lambda k: int(k[1:]))
    if not dims:
        raise DataError(f"{emb_path} has no embedding columns (e0, e1, ...)")
    vecs = np.array([[float(r[d]) for d in dims] for r in rows])
    coords = project_2d(vecs, method=method, seed=seed)
    utt_ids = [r["utt_id"] for r in rows]
    speaker_ids = [r["speaker_id"] for r in rows]
    kinds = [r.get("kind", "real") for r in rows]
    report.projection_csv(coords, speaker_ids, utt_ids,
                          out_dir / f"projection_{method}.csv", kinds=kinds)
    report.projection_figure(coords, speaker_ids,
                             out_dir / f"projection_{method}.png",
                             title=f"speaker embeddings ({method})")
    click.echo(f"wrote {len(rows)} points to {out_dir / f'projection_{method}.csv'}")


# ----------------------------------------------------------------- evaluate


@main.command("evaluate")
@click.option("--spectrum", "spectrum_ckpt", required=True,
              type=click.Path(path_type=Path))
@click.option("--vocoder", "vocoder_ckpt", type=click.Path(path_type=Path),
              default=None, help="Also render one waveform sample per speaker")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(path_type=Path))
@click.option("-o", "--out", "out_dir", type=click.Path(path_type=Path),
              default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--max-frames", type=int, default=400, show_default=True)
@_handled
def evaluate_cmd(spectrum_ckpt, vocoder_ckpt, manifest_path, out_dir, seed,
                 max_frames):
    """Score a model on a held-out manifest; writes CSV, figures, summary."""
    out_dir = out_dir or _default_out("evaluation")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle, _ = restore_spectrum_bundle(spectrum_ckpt)
    man = _read_manifest(manifest_path)
    rep = evaluate_spectrum(bundle, man, seed=seed, max_frames=max_frames)
    report.write_csv(out_dir / "evaluation.csv", rep.rows, EvalReport.FIELDS)
    report.evaluation_figure(rep.rows, out_dir / "evaluation.png")
    summary = {
        "n_utterances": rep.n_utterances,
        "mean_teacher_mse": rep.mean_teacher_mse,
        "mean_mel_distance": rep.mean_mel_distance,
        "mean_similarity": rep.mean_similarity,
        "centroid_accuracy": rep.centroid_accuracy,
        "stopped_fraction": rep.stopped_fraction,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    cfgmod.write_run_stamp(out_dir, "evaluate", seed, {"max_frames": max_frames})
    if vocoder_ckpt is not None:
        _render_samples(bundle, vocoder_ckpt, man, out_dir, seed)
    click.echo(
        f"{rep.n_utterances} utterances: mel distance {rep.mean_mel_distance:.3f}, "
        f"similarity {rep.mean_similarity:.3f}, "
        f"speaker accuracy {rep.centroid_accuracy:.0%}"
    )


def _render_samples(bundle, vocoder_ckpt, man, out_dir: Path, seed: int,
                    cap_frames: int = 40):
    """A short audible check per speaker, not a metric."""
    voc, _ = restore_vocoder_bundle(vocoder_ckpt)
    apply_ema(voc)
    features = load_features(man, stats=(bundle.mel_mean, bundle.mel_std))
    done = set()
    for u in features.utterances:
        if u.speaker_id in done:
            continue
        done.add(u.speaker_id)
        emb = _spectrum_embedding_from_features(bundle, u)
        rng = np.random.Generator(np.random.PCG64([seed, 31]))
        mel, _, _ = bundle.predictor.generate(u.tokens[None, :], emb,
                                              cap_frames, rng)
        voc_emb = voc.table.lookup_many([u.speaker_id])
        samples = voc.net.synthesize_fast(mel, voc_emb.data, seed=seed,
                                          temperature=0.7)
        path = out_dir / f"sample_{u.speaker_id}.wav"
        dsp.save_wav(dsp.Waveform(np.asarray(samples, dtype=np.float64)), path)
        click.echo(f"sample: {path}")


def _spectrum_embedding_from_features(bundle, utt) -> Tensor:
    if bundle.speaker_mode == "encoder":
        with no_grad():
            return bundle.speaker_model(Tensor(utt.mel[None, :, :]))
    return bundle.speaker_model.lookup_many([utt.speaker_id])


# -------------------------------------------------------------- scaling-run


@main.command("scaling-run")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(path_type=Path))
@click.option("--test-manifest", "test_manifest_path", required=True,
              type=click.Path(path_type=Path))
@click.option("--fractions", default="0.25,0.5,1.0", show_default=True)
@click.option("-o", "--out", "out_dir", type=click.Path(path_type=Path),
              default=None)
@click.option("--config", "config_path", type=click.Path(path_type=Path),
              default=None)
@click.option("--steps", "max_steps", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--profile", type=click.Choice(["toy", "full"]), default=None)
@_handled
def scaling_run_cmd(manifest_path, test_manifest_path, fractions, out_dir,
                    config_path, max_steps, batch_size, seed, profile):
    """Train on nested data fractions and chart mel distance against size."""
    out_dir = out_dir or _default_out("scaling")
    try:
        fracs = [float(t) for t in fractions.split(",") if t.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --fractions: {e}") from None
    if not fracs:
        raise ConfigError("need at least one fraction")
    cfg = _train_cfg(config_path, max_steps=max_steps, batch_size=batch_size,
                     seed=seed, profile=profile)
    cfgmod.write_run_stamp(out_dir, "scaling-run", cfg.seed, {
        "fractions": fracs, **cfgmod.train_config_dict(cfg)})
    man = _read_manifest(manifest_path)
    test_man = _read_manifest(test_manifest_path)
    rows = data_scaling_run(man, test_man, fracs, cfg, out_dir)
    report.scaling_figure(rows, Path(out_dir) / "scaling.png")
    for r in rows:
        click.echo(f"fraction {r['fraction']:g}: mel distance {r['mel_distance']:.3f} "
                   f"({r['n_train']} utterances)")


if __name__ == "__main__":
    main()
