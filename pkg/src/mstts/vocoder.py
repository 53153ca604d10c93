"""Speaker-conditioned autoregressive waveform model.

A stack of 20 dilated causal convolutions (kernel 2, dilation cycle
1..512 twice, receptive field 2047 samples) with gated activations;
mel + speaker-embedding conditioning enters every layer through 1x1
projections inside the gate.  The output head parameterizes a discretized
mixture of logistics over the 65536 sample levels.

Generation is sample-by-sample.  The fast path keeps one ring buffer per
layer so each step costs O(layers); the naive path replays the whole
history through the same per-step kernel and exists as a bit-exact oracle
for the queue bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .numerics import Tensor, ops
from .numerics.layers import glorot
from .numerics.tensor import as_tensor, no_grad, parameter
from .speaker import EMBED_DIM, SpeakerTable

N_LEVELS = 65536
BIN_HALF_WIDTH = 1.0 / 65535.0


class VocoderSpeakerTable(SpeakerTable):
    """The vocoder's own trainable speaker lookup table; rows are the only
    per-speaker state this model learns, for training and new speakers alike."""

    def params(self, prefix: str = "voc_table") -> dict:
        return super().params(prefix)


@dataclass
class VocoderConfig:
    n_mels: int = 40
    n_layers: int = 20
    kernel: int = 2
    dilation_cycle: int = 10
    residual_channels: int = 32
    skip_channels: int = 64
    n_mixtures: int = 10
    log_scale_floor: float = -7.0
    hop: int = 200

    def dilations(self) -> list[int]:
        return [2 ** (i % self.dilation_cycle) for i in range(self.n_layers)]

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel - 1) * sum(self.dilations())

    @property
    def cond_channels(self) -> int:
        return self.n_mels + EMBED_DIM


def samples_to_float(samples: np.ndarray) -> np.ndarray:
    """16-bit levels [-32768, 32767] -> bin centers in [-1, 1]."""
    return (np.asarray(samples, dtype=np.float64) + 32768.0) * (2.0 / 65535.0) - 1.0


def float_to_samples(x: np.ndarray) -> np.ndarray:
    """Floats in [-1, 1] -> nearest 16-bit level."""
    s = np.round((np.asarray(x, dtype=np.float64) + 1.0) * (65535.0 / 2.0)) - 32768.0
    return np.clip(s, -32768, 32767).astype(np.int64)


def upsample_conditioning(mel: np.ndarray, emb, hop: int, mode: str = "nearest"):
    """[B,F,M] mel + [B,128] emb -> [B,F*hop,M+128] per-sample features.

    The mel part is a constant; the embedding part stays in the graph so
    table rows receive gradients.
    """
    mel = np.asarray(mel)
    if mel.ndim == 2:
        mel = mel[None]
    b, frames, n_mels = mel.shape
    if hop <= 0:
        raise DataError(f"hop must be positive, got {hop}")
    t = frames * hop
    if mode == "nearest":
        up = np.repeat(mel, hop, axis=1)
    elif mode == "linear":
        pos = (np.arange(t) + 0.5) / hop - 0.5
        idx = np.clip(np.floor(pos).astype(int), 0, frames - 1)
        nxt = np.minimum(idx + 1, frames - 1)
        frac = np.clip(pos - idx, 0.0, 1.0)[None, :, None]
        up = (1.0 - frac) * mel[:, idx] + frac * mel[:, nxt]
    else:
        raise DataError(f"unknown upsampling mode {mode!r}")
    emb = as_tensor(emb)
    if emb.ndim == 1:
        emb = ops.reshape(emb, (1, -1))
    if emb.shape[0] != b:
        raise DataError(f"batch mismatch: mel {b} rows, emb {emb.shape[0]}")
    tiled = ops.repeat_time(ops.reshape(emb, (b, 1, emb.shape[1])), t)
    return ops.concat([Tensor(up.astype(np.float32)), tiled], axis=-1)


def mol_log_prob(mol, samples: np.ndarray, log_scale_floor: float = -7.0):
    """Log probability of 16-bit levels under a discretized logistic mixture.

    mol holds raw head outputs [..., 3K]: K mixture logits, K raw means
    (tanh-squashed here), K raw log-scales (floored here).  The mass of each
    1/65535-wide bin is a CDF difference; edge bins absorb their tail.  Bins
    whose direct mass underflows fall back to pdf x width, with the branch
    switch treated as a constant.
    """
    mol = as_tensor(mol)
    k = mol.shape[-1] // 3
    if mol.shape[-1] != 3 * k:
        raise DataError(f"mol channel count {mol.shape[-1]} not divisible by 3")
    s = np.asarray(samples)
    if s.min() < -32768 or s.max() > 32767:
        raise DataError("sample level outside 16-bit range")
    x = samples_to_float(s)[..., None].astype(mol.data.dtype)

    logits = mol[..., 0:k]
    means = ops.tanh(mol[..., k : 2 * k])
    log_scales = ops.clamp_min(mol[..., 2 * k : 3 * k], log_scale_floor)
    inv_s = ops.exp(ops.neg(log_scales))
    centered = ops.sub(Tensor(x), means)
    plus_in = ops.mul(inv_s, ops.add(centered, BIN_HALF_WIDTH))
    minus_in = ops.mul(inv_s, ops.sub(centered, BIN_HALF_WIDTH))

    cdf_delta = ops.sub(ops.sigmoid(plus_in), ops.sigmoid(minus_in))
    log_delta = ops.log(ops.clamp_min(cdf_delta, 1e-12))
    # logistic log-pdf at the bin center, times bin width
    mid = ops.mul(inv_s, centered)
    log_pdf_bin = ops.add(
        ops.sub(ops.sub(ops.neg(mid), log_scales), ops.mul(ops.softplus(ops.neg(mid)), 2.0)),
        float(np.log(2.0 * BIN_HALF_WIDTH)),
    )
    log_cdf_low = ops.neg(ops.softplus(ops.neg(plus_in)))  # log sigmoid(plus)
    log_sf_high = ops.neg(ops.softplus(minus_in))  # log(1 - sigmoid(minus))

    use_pdf = (cdf_delta.data < 1e-5).astype(mol.data.dtype)
    inner = ops.add(
        ops.mul(log_delta, 1.0 - use_pdf), ops.mul(log_pdf_bin, use_pdf)
    )
    low = (s == -32768)[..., None].astype(mol.data.dtype)
    high = (s == 32767)[..., None].astype(mol.data.dtype)
    mid_mask = 1.0 - low - high
    per_comp = ops.add(
        ops.add(ops.mul(inner, mid_mask), ops.mul(log_cdf_low, low)),
        ops.mul(log_sf_high, high),
    )
    log_weights = ops.sub(logits, ops.logsumexp(logits, axis=-1, keepdims=True))
    return ops.logsumexp(ops.add(log_weights, per_comp), axis=-1)


class VocoderNet:
    def __init__(self, rng, cfg: VocoderConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        r, sk, cc = cfg.residual_channels, cfg.skip_channels, cfg.cond_channels
        kk = cfg.kernel
        self.in_w = parameter(glorot(rng, (1, r), 1, r, dtype))
        self.in_b = parameter(np.zeros(r, dtype=dtype))
        self.layers = []
        for d in cfg.dilations():
            self.layers.append(
                {
                    "dilation": d,
                    "conv_w": parameter(glorot(rng, (kk, r, 2 * r), kk * r, 2 * r, dtype)),
                    "conv_b": parameter(np.zeros(2 * r, dtype=dtype)),
                    "cond_w": parameter(glorot(rng, (cc, 2 * r), cc, 2 * r, dtype)),
                    "skip_w": parameter(glorot(rng, (r, sk), r, sk, dtype)),
                    "skip_b": parameter(np.zeros(sk, dtype=dtype)),
                    "res_w": parameter(glorot(rng, (r, r), r, r, dtype)),
                    "res_b": parameter(np.zeros(r, dtype=dtype)),
                }
            )
        self.head1_w = parameter(glorot(rng, (sk, sk), sk, sk, dtype))
        self.head1_b = parameter(np.zeros(sk, dtype=dtype))
        self.head2_w = parameter(glorot(rng, (sk, 3 * cfg.n_mixtures), sk, 3 * cfg.n_mixtures, dtype))
        self.head2_b = parameter(np.zeros(3 * cfg.n_mixtures, dtype=dtype))
        assert len(self.layers) == cfg.n_layers

    def params(self, prefix: str = "voc") -> dict:
        out = {f"{prefix}.in.w": self.in_w, f"{prefix}.in.b": self.in_b}
        for i, layer in enumerate(self.layers):
            p = f"{prefix}.layer{i:02d}"
            out[f"{p}.conv.w"] = layer["conv_w"]
            out[f"{p}.conv.b"] = layer["conv_b"]
            out[f"{p}.cond.w"] = layer["cond_w"]
            out[f"{p}.skip.w"] = layer["skip_w"]
            out[f"{p}.skip.b"] = layer["skip_b"]
            out[f"{p}.res.w"] = layer["res_w"]
            out[f"{p}.res.b"] = layer["res_b"]
        out[f"{prefix}.head1.w"] = self.head1_w
        out[f"{prefix}.head1.b"] = self.head1_b
        out[f"{prefix}.head2.w"] = self.head2_w
        out[f"{prefix}.head2.b"] = self.head2_b
        return out

    def forward_teacher_forced(self, samples: np.ndarray, conditioning):
        """samples [B,T] int levels; conditioning [B,T,C].  Returns
        (mol [B,T,3K], nll scalar).  Output at t sees only samples < t."""
        samples = np.asarray(samples)
        if samples.ndim != 2:
            raise DataError(f"samples must be [batch, time], got {samples.shape}")
        cond = as_tensor(conditioning)
        if cond.shape[0] != samples.shape[0] or cond.shape[1] != samples.shape[1]:
            raise DataError(
                f"conditioning length {cond.shape[:2]} != samples {samples.shape}"
            )
        b, t = samples.shape
        x = samples_to_float(samples).astype(self.dtype)
        shifted = np.concatenate([np.zeros((b, 1), self.dtype), x[:, :-1]], axis=1)
        mol = self._net(Tensor(shifted[:, :, None]), cond)
        lp = mol_log_prob(mol, samples, self.cfg.log_scale_floor)
        nll = ops.neg(ops.mean(lp))
        return mol, nll

    def _net(self, shifted_in, cond):
        h = ops.add(ops.matmul(shifted_in, self.in_w), self.in_b)
        skip_total = None
        r = self.cfg.residual_channels
        for layer in self.layers:
            z = ops.conv1d(
                h, layer["conv_w"], layer["conv_b"],
                dilation=layer["dilation"], padding="causal",
            )
            z = ops.add(z, ops.matmul(cond, layer["cond_w"]))
            gated = ops.mul(ops.tanh(z[..., :r]), ops.sigmoid(z[..., r:]))
            skip = ops.add(ops.matmul(gated, layer["skip_w"]), layer["skip_b"])
            skip_total = skip if skip_total is None else ops.add(skip_total, skip)
            h = ops.add(h, ops.add(ops.matmul(gated, layer["res_w"]), layer["res_b"]))
        out = ops.relu(skip_total)
        out = ops.relu(ops.add(ops.matmul(out, self.head1_w), self.head1_b))
        return ops.add(ops.matmul(out, self.head2_w), self.head2_b)

    # --- sample-by-sample generation ---

    def _np_params(self):
        """Raw float arrays for the generation loop (no autodiff)."""
        g = {
            "in_w": self.in_w.data, "in_b": self.in_b.data,
            "head1_w": self.head1_w.data, "head1_b": self.head1_b.data,
            "head2_w": self.head2_w.data, "head2_b": self.head2_b.data,
            "layers": [
                {k: (v.data if isinstance(v, Tensor) else v) for k, v in layer.items()}
                for layer in self.layers
            ],
        }
        return g

    def _step(self, p, x_prev: float, cond_t: np.ndarray, queues, write: bool):
        """One generation step with the shared kernel; queues hold each
        layer's past inputs.  write=False leaves the queues untouched
        (used by the naive replayer's final probe step)."""
        r = self.cfg.residual_channels
        h = np.array([x_prev], dtype=self.dtype) @ p["in_w"] + p["in_b"]
        skip_total = np.zeros(self.cfg.skip_channels, dtype=self.dtype)
        for i, layer in enumerate(p["layers"]):
            buf, pos = queues[i]
            delayed = buf[pos]
            z = delayed @ layer["conv_w"][0] + h @ layer["conv_w"][1] + layer["conv_b"]
            z = z + cond_t @ layer["cond_w"]
            gated = np.tanh(z[:r]) * _sigmoid_np(z[r:])
            skip_total = skip_total + (gated @ layer["skip_w"] + layer["skip_b"])
            if write:
                buf[pos] = h
                queues[i][1] = (pos + 1) % buf.shape[0]
            h = h + (gated @ layer["res_w"] + layer["res_b"])
        out = np.maximum(skip_total, 0.0)
        out = np.maximum(out @ p["head1_w"] + p["head1_b"], 0.0)
        return out @ p["head2_w"] + p["head2_b"]

    def _fresh_queues(self):
        return [
            [np.zeros((d, self.cfg.residual_channels), dtype=self.dtype), 0]
            for d in self.cfg.dilations()
        ]

    def synthesize_fast(self, mel: np.ndarray, emb: np.ndarray, seed: int,
                        temperature: float = 1.0) -> np.ndarray:
        """Autoregressive generation with per-layer ring buffers; returns
        float samples of length frames*hop."""
        with no_grad():
            cond = upsample_conditioning(mel, Tensor(np.asarray(emb, dtype=self.dtype)),
                                         self.cfg.hop).data[0]
        p = self._np_params()
        rng = np.random.default_rng(seed)
        queues = self._fresh_queues()
        t_total = cond.shape[0]
        out = np.zeros(t_total, dtype=np.float64)
        x_prev = 0.0
        for t in range(t_total):
            mol = self._step(p, x_prev, cond[t], queues, write=True)
            level = sample_from_mol(mol, rng, temperature, self.cfg.log_scale_floor)
            x_prev = float(samples_to_float(level))
            out[t] = x_prev
        return out

    def synthesize_naive(self, mel: np.ndarray, emb: np.ndarray, seed: int,
                         temperature: float = 1.0) -> np.ndarray:
        """Oracle generator: per emitted sample, replays the whole history
        through the same per-step kernel with fresh queues.  O(T^2); exists
        to pin down the fast path's queue bookkeeping."""
        with no_grad():
            cond = upsample_conditioning(mel, Tensor(np.asarray(emb, dtype=self.dtype)),
                                         self.cfg.hop).data[0]
        p = self._np_params()
        rng = np.random.default_rng(seed)
        t_total = cond.shape[0]
        out = np.zeros(t_total, dtype=np.float64)
        history = [0.0]
        for t in range(t_total):
            queues = self._fresh_queues()
            for u in range(t):
                self._step(p, history[u], cond[u], queues, write=True)
            mol = self._step(p, history[t], cond[t], queues, write=True)
            level = sample_from_mol(mol, rng, temperature, self.cfg.log_scale_floor)
            x = float(samples_to_float(level))
            out[t] = x
            history.append(x)
        return out


def _sigmoid_np(z):
    return 1.0 / (1.0 + np.exp(-z))


def sample_from_mol(mol: np.ndarray, rng: np.random.Generator, temperature: float,
                    log_scale_floor: float = -7.0) -> int:
    """Draw one 16-bit level from raw head outputs [3K].

    temperature scales both the component choice and the logistic noise;
    at 0 it degenerates to the argmax component's mean (documented mode).
    """
    mol = np.asarray(mol, dtype=np.float64)
    k = mol.size // 3
    logits, raw_means, raw_ls = mol[:k], mol[k : 2 * k], mol[2 * k :]
    means = np.tanh(raw_means)
    scales = np.exp(np.maximum(raw_ls, log_scale_floor))
    if temperature <= 0.0:
        comp = int(np.argmax(logits))
        x = means[comp]
    else:
        z = logits / temperature
        probs = np.exp(z - z.max())
        probs /= probs.sum()
        comp = int(np.searchsorted(np.cumsum(probs), rng.random()))
        comp = min(comp, k - 1)
        u = rng.uniform(1e-5, 1.0 - 1e-5)
        x = means[comp] + scales[comp] * temperature * (np.log(u) - np.log1p(-u))
    return int(float_to_samples(np.clip(x, -1.0, 1.0)))
