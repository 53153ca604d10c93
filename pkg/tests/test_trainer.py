"""Trainer stack: checkpoints, feature batching, loops, eval, adaptation."""

import dataclasses
import warnings
from pathlib import Path

import numpy as np
import pytest

from mstts import corpus
from mstts.corpus import Manifest
from mstts.errors import CheckpointError, ConfigError, DataError, DivergenceError
from mstts.numerics.optim import AdamState, EmaState, LrSchedule, lr_at
from mstts.numerics.tensor import parameter
from mstts.trainer import (
    Checkpoint,
    TrainConfig,
    assign_params,
    collate_spectrum,
    length_buckets,
    load_checkpoint,
    load_features,
    param_diff,
    pick_vocoder_batch,
    save_checkpoint,
    subset_manifest,
    train_spectrum,
    train_vocoder,
)
from mstts.trainer.adapt import AdaptationJob, adapt
from mstts.trainer.evaluate import (
    alignment_stress,
    dtw_distance,
    evaluate_spectrum,
    nearest_centroid,
    ood_token_sequences,
    speaker_centroids,
)


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return corpus.generate_corpus(out, n_speakers=2, utts_per_speaker=4, seed=3)


@pytest.fixture(scope="module")
def tiny_features(tiny_manifest):
    return load_features(tiny_manifest, with_samples=True)


@pytest.fixture(scope="module")
def trained(tiny_manifest, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    cfg = TrainConfig(max_steps=6, batch_size=2, checkpoint_every=0, seed=1)
    bundle, spath, srows = train_spectrum(tiny_manifest, cfg, out / "spec")
    cfgv = TrainConfig(max_steps=6, batch_size=2, excerpt_frames=4,
                       checkpoint_every=0, seed=1)
    vbundle, vpath, vrows = train_vocoder(tiny_manifest, cfgv, out / "voc")
    return {
        "bundle": bundle, "spectrum_ckpt": spath, "spectrum_rows": srows,
        "vocoder_bundle": vbundle, "vocoder_ckpt": vpath, "vocoder_rows": vrows,
    }


# ---------------------------------------------------------------- checkpoint


def _toy_checkpoint(rng):
    params = {
        "a.w": rng.normal(size=(3, 4)).astype(np.float32),
        "a.b": rng.normal(size=(4,)).astype(np.float32),
    }
    adam = AdamState(t=7)
    adam.m = {k: rng.normal(size=v.shape).astype(np.float32) for k, v in params.items()}
    adam.v = {k: rng.random(size=v.shape).astype(np.float32) for k, v in params.items()}
    ema = EmaState(decay=0.99,
                   shadow={k: v + 1.0 for k, v in params.items()})
    return Checkpoint(
        kind="spectrum", config_fingerprint="f" * 64, step=7, params=params,
        rng_state={"seed": 5}, speaker_ids=["x", "y"], adam=adam, ema=ema,
        extra={"note": 1},
    )


def test_checkpoint_roundtrip_bytes(tmp_path):
    ck = _toy_checkpoint(np.random.default_rng(0))
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, ck)
    loaded = load_checkpoint(p1)
    save_checkpoint(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.step == 7
    assert loaded.speaker_ids == ["x", "y"]
    assert loaded.adam.t == 7
    assert loaded.ema.decay == 0.99
    np.testing.assert_array_equal(loaded.params["a.w"], ck.params["a.w"])
    np.testing.assert_array_equal(loaded.adam.m["a.b"], ck.adam.m["a.b"])
    np.testing.assert_array_equal(loaded.ema.shadow["a.w"], ck.ema.shadow["a.w"])


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_checkpoint_trailing_bytes(tmp_path):
    ck = _toy_checkpoint(np.random.default_rng(0))
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, ck)
    p.write_bytes(p.read_bytes() + b"xx")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(p)


def test_checkpoint_fingerprint_gate(tmp_path):
    ck = _toy_checkpoint(np.random.default_rng(0))
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, ck)
    with pytest.raises(CheckpointError, match="fingerprint"):
        load_checkpoint(p, expect_fingerprint="0" * 64)
    loaded = load_checkpoint(p, expect_fingerprint="0" * 64,
                             override_fingerprint=True)
    assert loaded.config_fingerprint == "f" * 64


def test_assign_params_checks():
    model = {"a.w": parameter(np.zeros((2, 2), dtype=np.float32))}
    with pytest.raises(CheckpointError, match="mismatch"):
        assign_params(model, {})
    with pytest.raises(CheckpointError, match="mismatch"):
        assign_params(model, {"a.w": np.zeros((2, 2)), "b.w": np.zeros(1)})
    with pytest.raises(CheckpointError, match="shape"):
        assign_params(model, {"a.w": np.zeros((3, 3))})
    assign_params(model, {"a.w": np.ones((2, 2))})
    assert model["a.w"].data[0, 0] == 1.0


def test_param_diff():
    a = {"x": np.zeros(3), "y": np.ones(2)}
    b = {"x": np.zeros(3), "y": np.ones(2)}
    assert param_diff(a, b) == []
    b["y"] = b["y"] + 1e-8
    assert param_diff(a, b) == ["y"]
    del b["x"]
    assert param_diff(a, b) == ["x", "y"]


# ------------------------------------------------------------------ features


def test_load_features_shapes(tiny_features, tiny_manifest):
    fs = tiny_features
    assert len(fs.utterances) == len(tiny_manifest.records)
    assert fs.alphabet_size == 32
    for u in fs.utterances:
        assert u.mel.ndim == 2 and u.mel.shape[1] == fs.stft.n_mels
        assert u.mel.dtype == np.float32
        assert u.samples.size == u.mel.shape[0] * fs.stft.hop_length
        assert u.samples.min() >= -32768 and u.samples.max() <= 32767
        assert u.tokens.dtype == np.int64 and u.tokens.size > 0


def test_load_features_normalization(tiny_features):
    # stats come from this very corpus, so pooled frames should sit near
    # zero mean, unit-ish spread
    frames = np.concatenate([u.mel for u in tiny_features.utterances])
    assert abs(frames.mean()) < 0.3
    assert 0.5 < frames.std() < 2.0


def test_load_features_frozen_stats(tiny_manifest, tiny_features):
    mean = tiny_features.mel_mean + 10.0
    fs = load_features(tiny_manifest, stats=(mean, tiny_features.mel_std))
    a = tiny_features.utterances[0].mel
    b = fs.utterances[0].mel
    assert np.all(b < a)  # larger mean shifts normalized values down


def test_length_buckets_cover_all(tiny_features):
    buckets = length_buckets(tiny_features, 3)
    flat = [i for g in buckets for i in g]
    assert sorted(flat) == list(range(len(tiny_features.utterances)))
    lengths = [tiny_features.utterances[i].mel.shape[0] for i in flat]
    assert lengths == sorted(lengths)


def test_collate_spectrum_padding(tiny_features):
    utts = tiny_features.utterances[:3]
    batch = collate_spectrum(utts, reduction=2)
    assert batch.mel.shape[1] % 2 == 0
    for i, u in enumerate(utts):
        t = u.mel.shape[0]
        np.testing.assert_array_equal(batch.mel[i, :t], u.mel)
        assert np.all(batch.mel[i, t:] == 0.0)
        assert batch.frame_lengths[i] == t
        s = u.tokens.size
        np.testing.assert_array_equal(batch.tokens[i, :s], u.tokens)
        assert np.all(batch.tokens[i, s:] == 0)


def test_vocoder_batch_alignment(tiny_features):
    hop = tiny_features.stft.hop_length
    rng = np.random.default_rng(0)
    batch = pick_vocoder_batch(tiny_features, 3, 4, hop, rng)
    assert batch.samples.shape == (3, 4 * hop)
    assert batch.mel.shape[0] == 3 and batch.mel.shape[1] == 4
    # every excerpt must be a contiguous slice of some utterance
    found = 0
    for i in range(3):
        for u in tiny_features.utterances:
            t = u.samples.size - batch.samples.shape[1]
            for f0 in range(0, max(t // hop + 1, 0)):
                lo = f0 * hop
                if np.array_equal(u.samples[lo:lo + 4 * hop], batch.samples[i]):
                    np.testing.assert_array_equal(u.mel[f0:f0 + 4], batch.mel[i])
                    found += 1
                    break
            else:
                continue
            break
    assert found == 3


def test_vocoder_batch_requires_samples(tiny_manifest):
    fs = load_features(tiny_manifest, with_samples=False)
    with pytest.raises(DataError, match="with_samples"):
        pick_vocoder_batch(fs, 2, 4, fs.stft.hop_length, np.random.default_rng(0))


# -------------------------------------------------------------------- loops


def test_training_deterministic(tiny_manifest, tmp_path):
    cfg = TrainConfig(max_steps=4, batch_size=2, checkpoint_every=0, seed=5)
    _, p1, rows1 = train_spectrum(tiny_manifest, cfg, tmp_path / "r1")
    _, p2, rows2 = train_spectrum(tiny_manifest, cfg, tmp_path / "r2")
    assert rows1 == rows2
    assert Path(p1).read_bytes() == Path(p2).read_bytes()


def test_training_seed_matters(tiny_manifest, tmp_path):
    cfg5 = TrainConfig(max_steps=3, batch_size=2, checkpoint_every=0, seed=5)
    cfg6 = TrainConfig(max_steps=3, batch_size=2, checkpoint_every=0, seed=6)
    _, _, rows5 = train_spectrum(tiny_manifest, cfg5, tmp_path / "r5")
    _, _, rows6 = train_spectrum(tiny_manifest, cfg6, tmp_path / "r6")
    assert [r["total"] for r in rows5] != [r["total"] for r in rows6]


def test_spectrum_resume_bit_equality(tiny_manifest, tmp_path):
    cfg = TrainConfig(max_steps=8, batch_size=2, checkpoint_every=4, seed=9)
    _, pa, rows_a = train_spectrum(tiny_manifest, cfg, tmp_path / "straight")
    half = TrainConfig(max_steps=4, batch_size=2, checkpoint_every=0, seed=9)
    _, p4, _ = train_spectrum(tiny_manifest, half, tmp_path / "half")
    _, pb, rows_b = train_spectrum(tiny_manifest, cfg, tmp_path / "resumed",
                                   resume_from=p4)
    assert Path(pa).read_bytes() == Path(pb).read_bytes()
    assert [r["total"] for r in rows_a[4:]] == [r["total"] for r in rows_b]


def test_vocoder_resume_bit_equality(tiny_manifest, tmp_path):
    cfg = TrainConfig(max_steps=6, batch_size=2, excerpt_frames=4,
                      checkpoint_every=3, seed=9)
    _, pa, _ = train_vocoder(tiny_manifest, cfg, tmp_path / "straight")
    half = TrainConfig(max_steps=3, batch_size=2, excerpt_frames=4,
                       checkpoint_every=0, seed=9)
    _, p3, _ = train_vocoder(tiny_manifest, half, tmp_path / "half")
    _, pb, _ = train_vocoder(tiny_manifest, cfg, tmp_path / "resumed",
                             resume_from=p3)
    assert Path(pa).read_bytes() == Path(pb).read_bytes()


def test_resume_rejects_other_config(tiny_manifest, tmp_path, trained):
    cfg = TrainConfig(max_steps=2, batch_size=2, checkpoint_every=0, seed=1)
    with pytest.raises(CheckpointError, match="fingerprint"):
        train_spectrum(tiny_manifest, cfg, tmp_path / "bad",
                       resume_from=trained["vocoder_ckpt"])


def test_lr_logged_matches_schedule(tiny_manifest, tmp_path):
    sched = LrSchedule(initial_lr=1e-3, decay_start_step=2, min_lr=1e-4)
    cfg = TrainConfig(max_steps=5, batch_size=2, checkpoint_every=0, seed=1,
                      schedule=sched)
    _, _, rows = train_spectrum(tiny_manifest, cfg, tmp_path / "run")
    for r in rows:
        assert r["lr"] == lr_at(r["step"], sched)
    assert rows[0]["lr"] == 1e-3
    assert rows[-1]["lr"] < 1e-3


def test_divergence_aborts_keeping_checkpoint(tiny_manifest, tmp_path):
    sched = LrSchedule(initial_lr=1e30, decay_start_step=10, min_lr=1e29)
    cfg = TrainConfig(max_steps=6, batch_size=2, checkpoint_every=1, seed=1,
                      schedule=sched, grad_clip=0.0)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError):
        train_spectrum(tiny_manifest, cfg, tmp_path / "run")
    kept = list((tmp_path / "run").glob("spectrum_step*.ckpt"))
    assert kept, "the pre-divergence checkpoint should remain on disk"
    load_checkpoint(kept[0])  # still readable


def test_loss_csv_written(trained, tmp_path):
    rows = trained["spectrum_rows"]
    assert rows[0]["step"] == 1
    assert set(rows[0]) == {"step", "lr", "total", "mse_pre", "mse_post",
                            "stop", "l2"}
    csv_path = Path(trained["spectrum_ckpt"]).parent / "loss_spectrum.csv"
    lines = csv_path.read_text().strip().splitlines()
    assert len(lines) == len(rows) + 1


def test_subset_manifest(tiny_manifest):
    sub = subset_manifest(tiny_manifest, 0.5, seed=3)
    per = {}
    for r in sub.records:
        per[r.speaker_id] = per.get(r.speaker_id, 0) + 1
    assert all(v == 2 for v in per.values())  # half of 4 each
    again = subset_manifest(tiny_manifest, 0.5, seed=3)
    assert [r.utt_id for r in again.records] == [r.utt_id for r in sub.records]
    full = subset_manifest(tiny_manifest, 1.0, seed=3)
    assert [r.utt_id for r in full.records] == [r.utt_id for r in tiny_manifest.records]
    with pytest.raises(ConfigError):
        subset_manifest(tiny_manifest, 0.0, seed=3)


# ----------------------------------------------------------------- evaluate


def test_dtw_basics():
    a = np.random.default_rng(0).normal(size=(20, 5))
    assert dtw_distance(a, a) == 0.0
    stretched = np.repeat(a, 3, axis=0)
    assert dtw_distance(a, stretched) == pytest.approx(0.0)
    assert dtw_distance(a, a + 1.0) > 0.0
    with pytest.raises(DataError):
        dtw_distance(a, np.zeros((0, 5)))
    with pytest.raises(DataError):
        dtw_distance(a, np.zeros((4, 6)))


def test_dtw_tolerates_time_shift():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(30, 4))
    shifted = np.concatenate([np.tile(a[:1], (5, 1)), a], axis=0)
    assert dtw_distance(a, shifted) < 1e-12
    assert dtw_distance(a, rng.normal(size=(30, 4))) > 1.0


def test_centroids_and_nearest(tiny_features, trained):
    judge = trained["bundle"].speaker_model
    cents = speaker_centroids(tiny_features, judge)
    assert set(cents) == set(u.speaker_id for u in tiny_features.utterances)
    for spk, c in cents.items():
        assert np.linalg.norm(c) == pytest.approx(1.0, abs=1e-6)
        assert nearest_centroid(c, cents) == spk


def test_evaluate_spectrum_report(trained, tiny_manifest):
    rep = evaluate_spectrum(trained["bundle"], tiny_manifest, seed=0,
                            max_frames=80)
    assert rep.n_utterances == len(tiny_manifest.records)
    assert len(rep.rows) == rep.n_utterances
    assert np.isfinite(rep.mean_teacher_mse)
    assert np.isfinite(rep.mean_mel_distance)
    assert -1.0 <= rep.mean_similarity <= 1.0
    assert 0.0 <= rep.centroid_accuracy <= 1.0
    rep2 = evaluate_spectrum(trained["bundle"], tiny_manifest, seed=0,
                             max_frames=80)
    assert rep.rows == rep2.rows


def test_evaluate_empty_set(trained, tiny_manifest):
    empty = Manifest(header=tiny_manifest.header, records=[],
                     root=tiny_manifest.root)
    with pytest.raises(DataError, match="empty"):
        evaluate_spectrum(trained["bundle"], empty, seed=0)


def test_ood_sequences_deterministic():
    seqs = ood_token_sequences(32, 48, 5, seed=4)
    again = ood_token_sequences(32, 48, 5, seed=4)
    assert len(seqs) == 5
    for a, b in zip(seqs, again):
        assert a.shape == (48,)
        np.testing.assert_array_equal(a, b)
        assert a.min() >= 0 and a.max() < 32


def test_alignment_stress_scores(trained, tiny_features):
    bundle = trained["bundle"]
    u = tiny_features.utterances[0]
    from mstts.numerics import Tensor, no_grad
    with no_grad():
        emb = bundle.speaker_model(Tensor(u.mel[None, :, :]))
    seqs = ood_token_sequences(32, 30, 3, seed=4)
    scores = alignment_stress(bundle, seqs, emb, max_frames=60)
    assert len(scores) == 3
    for mono, focus in scores:
        assert 0.0 <= mono <= 1.0
        assert 0.0 <= focus <= 1.0


# --------------------------------------------------------------- adaptation


@pytest.fixture(scope="module")
def newcomer_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("newcorp")
    man = corpus.generate_corpus(out, n_speakers=2, utts_per_speaker=3, seed=11)
    recs = [dataclasses.replace(r, speaker_id="newcomer")
            for r in man.records if r.speaker_id == "spk1"]
    return Manifest(header=man.header, records=recs, root=man.root)


def test_adapt_speaker_only_freezes_network(trained, newcomer_manifest, tmp_path):
    job = AdaptationJob(spectrum_ckpt=str(trained["spectrum_ckpt"]),
                        manifest=newcomer_manifest, mode="speaker_only",
                        vocoder_ckpt=str(trained["vocoder_ckpt"]),
                        steps=4, batch_size=2, excerpt_frames=4, seed=2)
    with pytest.warns(UserWarning, match="utterances"):
        res = adapt(job, tmp_path / "adapted")
    changed = res.report["changed_spectrum_params"]
    assert changed, "speaker model should have moved"
    assert all(n.startswith("spk_enc.") for n in changed)
    voc_changed = res.report["changed_vocoder_params"]
    assert voc_changed == ["voc_table.table"]
    ck = load_checkpoint(res.vocoder_ckpt)
    assert "newcomer" in ck.speaker_ids


def test_adapt_full_touches_predictor(trained, newcomer_manifest, tmp_path):
    job = AdaptationJob(spectrum_ckpt=str(trained["spectrum_ckpt"]),
                        manifest=newcomer_manifest, mode="full",
                        steps=3, batch_size=2, seed=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = adapt(job, tmp_path / "adapted")
    prefixes = {n.split(".")[0] for n in res.report["changed_spectrum_params"]}
    assert "spec" in prefixes
    assert res.report["lr"] == pytest.approx(1e-5)


def test_adapt_rejects_known_speaker(trained, tiny_manifest, tmp_path):
    job = AdaptationJob(spectrum_ckpt=str(trained["spectrum_ckpt"]),
                        manifest=tiny_manifest, mode="speaker_only",
                        vocoder_ckpt=str(trained["vocoder_ckpt"]),
                        steps=2, batch_size=2, excerpt_frames=4, seed=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(DataError, match="already"):
            adapt(job, tmp_path / "adapted")


def test_adapt_report_rows(trained, newcomer_manifest, tmp_path):
    job = AdaptationJob(spectrum_ckpt=str(trained["spectrum_ckpt"]),
                        manifest=newcomer_manifest, mode="speaker_only",
                        steps=2, batch_size=2, seed=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = adapt(job, tmp_path / "adapted")
    assert len(res.rows) == len(newcomer_manifest.records)
    csv_path = tmp_path / "adapted" / "adaptation_report.csv"
    assert csv_path.exists()
    assert res.report["low_data_warning"] is True
    assert res.report["new_speakers"] == ["newcomer"]
