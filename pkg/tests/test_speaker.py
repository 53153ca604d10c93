import csv

import numpy as np
import pytest

from mstts import speaker
from mstts.errors import DataError, UnknownSpeakerError
from mstts.numerics import Tensor, ops
from mstts.numerics.gradcheck import finite_difference_check


def test_encoder_output_unit_norm_many_inputs():
    rng = np.random.default_rng(0)
    enc = speaker.SpeakerEncoder(rng, n_mels=40)
    for trial in range(5):
        t = int(rng.integers(8, 60))
        mel = rng.normal(size=(2, t, 40)).astype(np.float32)
        out = enc(Tensor(mel))
        assert out.shape == (2, 128)
        norms = np.linalg.norm(out.data, axis=1)
        assert np.all(np.abs(norms - 1.0) < 1e-5)


def test_encoder_rejects_short_input():
    enc = speaker.SpeakerEncoder(np.random.default_rng(0), n_mels=40)
    with pytest.raises(DataError):
        enc(Tensor(np.zeros((1, 7, 40), dtype=np.float32)))


def test_encoder_channel_plan():
    enc = speaker.SpeakerEncoder(np.random.default_rng(0), n_mels=40)
    assert len(enc.convs) == 6
    assert tuple(c.w.shape[3] for c in enc.convs) == (32, 32, 64, 64, 128, 128)
    assert all(c.w.shape[:2] == (3, 3) for c in enc.convs)
    assert enc.fc1.w.shape == (128, 256)
    assert enc.proj.w.shape == (256, 128)


def test_tiled_features_pool_to_same_embedding():
    rng = np.random.default_rng(1)
    enc = speaker.SpeakerEncoder(rng, n_mels=40)
    feats = Tensor(rng.normal(size=(1, 6, enc.feat_dim)).astype(np.float32))
    tiled = Tensor(np.concatenate([feats.data, feats.data], axis=1))
    a = enc.embed_from_features(feats).data
    b = enc.embed_from_features(tiled).data
    assert np.allclose(a, b, atol=1e-6)


def test_masked_pooling_ignores_padding():
    rng = np.random.default_rng(2)
    enc = speaker.SpeakerEncoder(rng, n_mels=40)
    mel = rng.normal(size=(1, 16, 40)).astype(np.float32)
    padded = np.zeros((1, 32, 40), dtype=np.float32)
    padded[:, :16] = mel
    solo = enc(Tensor(mel), frame_counts=np.array([16])).data
    batch = enc(Tensor(padded), frame_counts=np.array([16])).data
    # conv "same" padding leaks a little across the boundary; pooling itself
    # must not average in the padded half
    assert speaker.cosine_similarity(solo[0], batch[0]) > 0.999


def test_encoder_gradients():
    rng = np.random.default_rng(3)
    enc = speaker.SpeakerEncoder(rng, n_mels=8, dtype=np.float64)
    mel = Tensor(rng.normal(size=(1, 8, 8)))
    params = enc.params()
    target = rng.normal(size=(1, 128))

    def build():
        d = ops.sub(enc(mel), target)
        return ops.sum_(ops.mul(d, d))

    err = finite_difference_check(build, params, max_coords_per_param=4, rng=rng)
    assert err < 1e-4


def test_table_lookup_round_trip_and_unknown():
    table = speaker.SpeakerTable(["a", "b"], rng=np.random.default_rng(0))
    v = table.lookup("a")
    assert v.shape == (128,)
    assert np.array_equal(v.data, table.table.data[0])
    with pytest.raises(UnknownSpeakerError, match="ghost"):
        table.lookup("ghost")


def test_table_rejects_duplicate_ids():
    with pytest.raises(DataError):
        speaker.SpeakerTable(["a", "a"])


def test_table_add_speaker_mean_init_keeps_old_rows():
    table = speaker.SpeakerTable(["a", "b"], rng=np.random.default_rng(1))
    before = table.table.data.copy()
    table.add_speaker("c")
    assert np.array_equal(table.table.data[:2], before)
    assert np.allclose(table.table.data[2], before.mean(axis=0))
    with pytest.raises(DataError):
        table.add_speaker("c")


def test_cosine_similarity_basics():
    e = np.array([1.0, 0.0, 0.0])
    assert speaker.cosine_similarity(e, e) == pytest.approx(1.0)
    assert speaker.cosine_similarity(e, np.array([0.0, 1.0, 0.0])) == pytest.approx(0.0)
    assert speaker.cosine_similarity(e, -e) == pytest.approx(-1.0)
    with pytest.raises(DataError):
        speaker.cosine_similarity(e, np.zeros(3))


def test_cosine_symmetric_and_scale_invariant():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=128), rng.normal(size=128)
    assert speaker.cosine_similarity(a, b) == pytest.approx(speaker.cosine_similarity(b, a))
    assert speaker.cosine_similarity(3.7 * a, 0.2 * b) == pytest.approx(
        speaker.cosine_similarity(a, b)
    )


def test_pca_recovers_planar_data():
    rng = np.random.default_rng(5)
    basis = np.linalg.qr(rng.normal(size=(128, 2)))[0]
    coords = rng.normal(size=(50, 2)) * [5.0, 2.0]
    x = coords @ basis.T
    proj = speaker.pca_2d(x)
    # pairwise distances preserved exactly for rank-2 input
    def pdist(p):
        return np.linalg.norm(p[:, None] - p[None, :], axis=-1)

    assert np.allclose(pdist(proj), pdist(coords), atol=1e-8)


def test_pca_sign_convention_deterministic():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(20, 128))
    a = speaker.pca_2d(x)
    b = speaker.pca_2d(x.copy())
    assert np.array_equal(a, b)


def test_tsne_deterministic_and_separates_clusters():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(20, 128)) * 0.05
    b = rng.normal(size=(20, 128)) * 0.05
    b[:, 0] += 30.0
    x = np.concatenate([a, b])
    y1 = speaker.tsne_2d(x, seed=3, n_iter=300)
    y2 = speaker.tsne_2d(x, seed=3, n_iter=300)
    assert np.array_equal(y1, y2)
    ya, yb = y1[:20], y1[20:]
    intra = max(
        np.linalg.norm(ya[:, None] - ya[None, :], axis=-1).max(),
        np.linalg.norm(yb[:, None] - yb[None, :], axis=-1).max(),
    )
    inter = np.linalg.norm(ya[:, None] - yb[None, :], axis=-1).min()
    assert inter > intra


def test_tsne_rejects_degenerate_input():
    with pytest.raises(DataError):
        speaker.tsne_2d(np.ones((5, 128)), seed=0)
    with pytest.raises(DataError):
        speaker.tsne_2d(np.ones((2, 128)), seed=0)


def test_projection_csv_format(tmp_path):
    points = np.array([[1.0, 2.0], [3.0, 4.0]])
    path = tmp_path / "proj.csv"
    speaker.write_projection_csv(
        path, ["u1", "u2"], ["s1", "s2"], ["real", "synth"], points
    )
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["utt_id", "speaker_id", "kind", "x", "y"]
    assert rows[1] == ["u1", "s1", "real", "1.000000", "2.000000"]
    with pytest.raises(DataError):
        speaker.write_projection_csv(path, ["u"], ["s"], ["fake"], points[:1])
