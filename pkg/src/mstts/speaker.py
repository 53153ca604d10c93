"""Speaker identity: encoder network, lookup table, similarity, 2-D maps.

The encoder walks a mel-spectrogram through six 3x3 conv layers (channels
32, 32, 64, 64, 128, 128; every layer halves the mel axis, layers 2/4/6 halve
time), averages over time, and projects through two 256-wide FC layers to a
unit-norm 128-vector.  Table entries are free parameters and stay
unnormalized.
"""

from __future__ import annotations

import csv

import numpy as np

from .errors import DataError, UnknownSpeakerError
from .numerics import Tensor, layers, ops, parameter
from .numerics.layers import Conv2d, Linear

EMBED_DIM = 128
ENCODER_CHANNELS = (32, 32, 64, 64, 128, 128)
FC_WIDTH = 256
# three time-halving layers -> at least 2**3 frames required
MIN_ENCODER_FRAMES = 8


class SpeakerEncoder:
    def __init__(self, rng, n_mels: int, dtype=np.float32):
        self.n_mels = n_mels
        self.convs = []
        c_in = 1
        for i, c_out in enumerate(ENCODER_CHANNELS):
            stride = (2, 2) if i % 2 == 1 else (1, 2)
            self.convs.append(Conv2d(rng, c_in, c_out, kernel=(3, 3), stride=stride, dtype=dtype))
            c_in = c_out
        mel_out = n_mels
        for _ in ENCODER_CHANNELS:
            mel_out = -(-mel_out // 2)
        self.feat_dim = mel_out * ENCODER_CHANNELS[-1]
        self.fc1 = Linear(rng, self.feat_dim, FC_WIDTH, dtype=dtype)
        self.fc2 = Linear(rng, FC_WIDTH, FC_WIDTH, dtype=dtype)
        self.proj = Linear(rng, FC_WIDTH, EMBED_DIM, dtype=dtype)

    def conv_features(self, mels: Tensor, frame_counts: np.ndarray | None = None) -> Tensor:
        """[B, T, n_mels] -> [B, T', feat_dim] with T' = ceil(T/8).

        With frame_counts, activations past each row's valid length are zeroed
        after every layer, so padded batch entries match their unpadded runs
        (conv bias + relu would otherwise leak into the valid region).
        """
        if mels.shape[1] < MIN_ENCODER_FRAMES:
            raise DataError(
                f"speaker encoder needs >= {MIN_ENCODER_FRAMES} frames, got {mels.shape[1]}"
            )
        valid = None if frame_counts is None else np.asarray(frame_counts)
        x = ops.reshape(mels, (*mels.shape, 1))
        for conv in self.convs:
            x = ops.relu(conv(x))
            if valid is not None:
                valid = -(-valid // conv.stride[0])
                mask = (np.arange(x.shape[1])[None, :] < valid[:, None]).astype(x.data.dtype)
                x = ops.mul(x, mask[:, :, None, None])
        b, t = x.shape[0], x.shape[1]
        return ops.reshape(x, (b, t, self.feat_dim))

    def embed_from_features(self, feats: Tensor, frame_counts: np.ndarray | None = None) -> Tensor:
        """Time-average then project; the pooling entry point is public so
        pooling invariances can be probed without rebuilding conv stacks."""
        if frame_counts is None:
            pooled = ops.mean(feats, axis=1)
        else:
            t = feats.shape[1]
            valid = -(-np.asarray(frame_counts) // 8)  # frames left after stride 8
            mask = (np.arange(t)[None, :] < valid[:, None]).astype(feats.data.dtype)
            summed = ops.sum_(ops.mul(feats, mask[:, :, None]), axis=1)
            pooled = ops.div(summed, valid[:, None].astype(feats.data.dtype))
        h = ops.relu(self.fc1(pooled))
        h = ops.relu(self.fc2(h))
        return ops.l2_normalize(self.proj(h), axis=-1)

    def __call__(self, mels: Tensor, frame_counts: np.ndarray | None = None) -> Tensor:
        return self.embed_from_features(self.conv_features(mels, frame_counts), frame_counts)

    def params(self, prefix: str = "spk_enc") -> dict:
        out = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.params(f"{prefix}.conv{i}"))
        out.update(self.fc1.params(f"{prefix}.fc1"))
        out.update(self.fc2.params(f"{prefix}.fc2"))
        out.update(self.proj.params(f"{prefix}.proj"))
        return out


def encode_speaker(mel: np.ndarray, encoder: SpeakerEncoder) -> np.ndarray:
    """Single utterance [T, n_mels] -> unit-norm [128] numpy vector."""
    from .numerics import no_grad

    with no_grad():
        out = encoder(Tensor(mel[None, :, :]))
    return out.data[0]


class SpeakerTable:
    """Trainable id -> 128-vector map backed by one parameter matrix."""

    def __init__(self, speaker_ids: list[str], rng=None, scale: float = 0.1, dtype=np.float32):
        if len(set(speaker_ids)) != len(speaker_ids):
            raise DataError("speaker ids must be unique")
        self.ids = list(speaker_ids)
        self.index = {s: i for i, s in enumerate(self.ids)}
        rng = rng or np.random.default_rng(0)
        self.table = parameter(rng.normal(scale=scale, size=(len(self.ids), EMBED_DIM)).astype(dtype))

    def lookup(self, speaker_id: str) -> Tensor:
        return self.lookup_many([speaker_id])[0, :]

    def lookup_many(self, speaker_ids: list[str]) -> Tensor:
        try:
            idx = np.array([self.index[s] for s in speaker_ids])
        except KeyError as e:
            raise UnknownSpeakerError(f"unknown speaker {e.args[0]!r}") from None
        return ops.embedding(self.table, idx)

    def add_speaker(self, speaker_id: str) -> None:
        """New row initialized to the mean of existing rows."""
        if speaker_id in self.index:
            raise DataError(f"speaker {speaker_id!r} already present")
        mean_row = self.table.data.mean(axis=0, keepdims=True)
        self.index[speaker_id] = len(self.ids)
        self.ids.append(speaker_id)
        self.table = parameter(np.concatenate([self.table.data, mean_row], axis=0))

    def params(self, prefix: str = "spk_table") -> dict:
        return {f"{prefix}.table": self.table}


def cosine_similarity(a, b) -> float:
    va = np.asarray(getattr(a, "data", a), dtype=np.float64).ravel()
    vb = np.asarray(getattr(b, "data", b), dtype=np.float64).ravel()
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise DataError("cosine similarity undefined for zero vectors")
    return float(np.dot(va, vb) / (na * nb))


def pca_2d(points: np.ndarray) -> np.ndarray:
    """Top-2 principal components; sign fixed so each component's
    largest-magnitude loading is positive."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) < 3:
        raise DataError("need at least 3 points")
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for i in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


def _conditional_probs(sq_dists: np.ndarray, perplexity: float) -> np.ndarray:
    n = len(sq_dists)
    target = np.log(min(perplexity, n - 1))
    P = np.zeros((n, n))
    for i in range(n):
        d = np.delete(sq_dists[i], i)
        lo, hi = 1e-20, 1e20
        beta = 1.0
        for _ in range(60):
            w = np.exp(-d * beta)
            s = w.sum()
            if s <= 0:
                beta = lo = beta * 0.5
                continue
            p = w / s
            h = -np.sum(p * np.log(np.maximum(p, 1e-32)))
            if h > target:
                lo = beta
                beta = beta * 2 if hi >= 1e20 else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        row = np.insert(p, i, 0.0)
        P[i] = row
    return P


def tsne_2d(
    points: np.ndarray,
    seed: int,
    perplexity: float = 10.0,
    n_iter: int = 500,
    learning_rate: float = 100.0,
) -> np.ndarray:
    """Exact (quadratic) t-SNE, bit-reproducible for a given seed."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) < 3:
        raise DataError("need at least 3 points")
    sq = np.sum(x**2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * (x @ x.T), 0.0)
    if d2.max() == 0.0:
        raise DataError("all points identical; 2-D map is degenerate")
    P = _conditional_probs(d2, perplexity)
    P = (P + P.T) / (2.0 * len(x))
    P = np.maximum(P, 1e-12)

    rng = np.random.default_rng(seed)
    y = rng.normal(scale=1e-4, size=(len(x), 2))
    vel = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(n_iter):
        exaggeration = 12.0 if it < 100 else 1.0
        momentum = 0.5 if it < 250 else 0.8
        ysq = np.sum(y**2, axis=1)
        num = 1.0 / (1.0 + np.maximum(ysq[:, None] + ysq[None, :] - 2 * (y @ y.T), 0.0))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        pq = (exaggeration * P - Q) * num
        grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)
        gains = np.where(np.sign(grad) != np.sign(vel), gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, 0.01)
        vel = momentum * vel - learning_rate * gains * grad
        y = y + vel
        y = y - y.mean(axis=0)
    return y


def project_2d(embeddings, method: str, seed: int, perplexity: float = 10.0) -> np.ndarray:
    x = np.asarray(embeddings, dtype=np.float64)
    if method == "pca":
        return pca_2d(x)
    if method == "tsne":
        return tsne_2d(x, seed=seed, perplexity=perplexity)
    raise DataError(f"unknown projection method {method!r}")


def write_projection_csv(path, utt_ids, speaker_ids, kinds, points) -> None:
    points = np.asarray(points)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["utt_id", "speaker_id", "kind", "x", "y"])
        for uid, sid, kind, (px, py) in zip(utt_ids, speaker_ids, kinds, points):
            if kind not in ("real", "synth"):
                raise DataError(f"kind must be real|synth, got {kind!r}")
            w.writerow([uid, sid, kind, f"{px:.6f}", f"{py:.6f}"])
