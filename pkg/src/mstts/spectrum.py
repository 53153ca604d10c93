"""Attention sequence-to-sequence mel predictor conditioned on a speaker
embedding.

Layout: token embedding -> conv prenet + BiLSTM encoder; the speaker
embedding is concatenated to every encoder frame (the only door speaker
identity enters through); a location-sensitive attention feeds a two-LSTM
decoder that emits ``reduction`` mel frames and stop logits per step; a conv
postnet refines the mel with a residual connection.

The decoder prenet keeps dropout active at inference, so generation takes an
explicit rng and is deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .numerics import Tensor, ops
from .numerics.layers import BiLSTM, Conv1d, Linear, LSTMCell, glorot
from .numerics.tensor import parameter
from .speaker import EMBED_DIM


@dataclass
class SpectrumConfig:
    alphabet_size: int = 32
    n_mels: int = 40
    token_emb_dim: int = 128
    enc_conv_layers: int = 2
    enc_conv_channels: int = 128
    enc_conv_kernel: int = 5
    enc_rnn_width: int = 64  # per direction
    attn_dim: int = 128
    attn_filters: int = 32
    attn_kernel: int = 31
    prenet_width: int = 64
    prenet_dropout: float = 0.5
    dec_rnn_width: int = 256
    postnet_channels: int = 128
    postnet_layers: int = 3
    postnet_kernel: int = 5
    reduction: int = 2

    @property
    def encoder_width(self) -> int:
        return 2 * self.enc_rnn_width

    @property
    def memory_width(self) -> int:
        return self.encoder_width + EMBED_DIM


def condition_encoder(encoder_out: Tensor, emb: Tensor) -> Tensor:
    """Broadcast emb along time and concatenate: [B,S,E] + [B,128] -> [B,S,E+128]."""
    if encoder_out.ndim != 3 or emb.ndim != 2 or encoder_out.shape[0] != emb.shape[0]:
        raise DataError(
            f"bad shapes for conditioning: encoder {encoder_out.shape}, emb {emb.shape}"
        )
    s = encoder_out.shape[1]
    tiled = ops.repeat_time(ops.reshape(emb, (emb.shape[0], 1, emb.shape[1])), s)
    return ops.concat([encoder_out, tiled], axis=-1)


class LocationAttention:
    """Additive attention whose energies also see the previous step's
    attention weights through a 1-D conv (32 filters x 31 taps)."""

    def __init__(self, rng, query_width: int, memory_width: int, cfg: SpectrumConfig, dtype):
        a = cfg.attn_dim
        self.query = Linear(rng, query_width, a, bias=False, dtype=dtype)
        self.memory = Linear(rng, memory_width, a, dtype=dtype)
        self.loc_conv = Conv1d(
            rng, 1, cfg.attn_filters, kernel=cfg.attn_kernel, padding="same", bias=False, dtype=dtype
        )
        self.loc_proj = Linear(rng, cfg.attn_filters, a, bias=False, dtype=dtype)
        self.v = parameter(glorot(rng, (a, 1), a, 1, dtype))

    def project_memory(self, memory: Tensor) -> Tensor:
        return self.memory(memory)

    def __call__(self, query: Tensor, memory_proj: Tensor, prev_weights: Tensor, mask_bias):
        """query [B,W]; memory_proj [B,S,A]; prev_weights [B,S] -> weights [B,S]."""
        b, s = prev_weights.shape
        loc = self.loc_conv(ops.reshape(prev_weights, (b, s, 1)))
        feat = ops.tanh(
            ops.add(
                ops.add(ops.reshape(self.query(query), (b, 1, -1)), memory_proj),
                self.loc_proj(loc),
            )
        )
        energies = ops.reshape(ops.matmul(feat, self.v), (b, s))
        if mask_bias is not None:
            energies = ops.add(energies, mask_bias)
        return ops.softmax(energies, axis=-1)

    def params(self, prefix: str) -> dict:
        return {
            **self.query.params(f"{prefix}.query"),
            **self.memory.params(f"{prefix}.memory"),
            **self.loc_conv.params(f"{prefix}.loc_conv"),
            **self.loc_proj.params(f"{prefix}.loc_proj"),
            f"{prefix}.v.w": self.v,
        }


class SpectrumPredictor:
    def __init__(self, rng, cfg: SpectrumConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        c = cfg
        assert c.memory_width == c.encoder_width + EMBED_DIM
        self.token_emb = parameter(
            (0.1 * rng.normal(size=(c.alphabet_size, c.token_emb_dim))).astype(dtype)
        )
        self.enc_convs = []
        ch_in = c.token_emb_dim
        for _ in range(c.enc_conv_layers):
            self.enc_convs.append(
                Conv1d(rng, ch_in, c.enc_conv_channels, kernel=c.enc_conv_kernel, dtype=dtype)
            )
            ch_in = c.enc_conv_channels
        self.enc_rnn = BiLSTM(rng, ch_in, c.enc_rnn_width, dtype=dtype)

        self.prenet1 = Linear(rng, c.n_mels, c.prenet_width, dtype=dtype)
        self.prenet2 = Linear(rng, c.prenet_width, c.prenet_width, dtype=dtype)
        self.att_rnn = LSTMCell(rng, c.prenet_width + c.memory_width, c.dec_rnn_width, dtype=dtype)
        self.attention = LocationAttention(rng, c.dec_rnn_width, c.memory_width, c, dtype)
        self.dec_rnn = LSTMCell(rng, c.dec_rnn_width + c.memory_width, c.dec_rnn_width, dtype=dtype)
        out_in = c.dec_rnn_width + c.memory_width
        self.frame_proj = Linear(rng, out_in, c.reduction * c.n_mels, dtype=dtype)
        self.stop_proj = Linear(rng, out_in, c.reduction, dtype=dtype)
        # start "keep going": a fresh model must run to max_frames, not stop at
        # the first coin-flip logit
        self.stop_proj.b.data[:] = -2.0

        self.postnet = []
        for i in range(c.postnet_layers):
            last = i == c.postnet_layers - 1
            self.postnet.append(
                Conv1d(
                    rng,
                    c.n_mels if i == 0 else c.postnet_channels,
                    c.n_mels if last else c.postnet_channels,
                    kernel=c.postnet_kernel,
                    dtype=dtype,
                )
            )

    def params(self, prefix: str = "spec") -> dict:
        out = {f"{prefix}.token_emb.table": self.token_emb}
        for i, conv in enumerate(self.enc_convs):
            out.update(conv.params(f"{prefix}.enc_conv{i}"))
        out.update(self.enc_rnn.params(f"{prefix}.enc_rnn"))
        out.update(self.prenet1.params(f"{prefix}.prenet1"))
        out.update(self.prenet2.params(f"{prefix}.prenet2"))
        out.update(self.att_rnn.params(f"{prefix}.att_rnn"))
        out.update(self.attention.params(f"{prefix}.attn"))
        out.update(self.dec_rnn.params(f"{prefix}.dec_rnn"))
        out.update(self.frame_proj.params(f"{prefix}.frame_proj"))
        out.update(self.stop_proj.params(f"{prefix}.stop_proj"))
        for i, conv in enumerate(self.postnet):
            out.update(conv.params(f"{prefix}.postnet{i}"))
        return out

    def encode(self, tokens: np.ndarray, token_lengths: np.ndarray) -> Tensor:
        """[B,S] ids -> [B,S,encoder_width]; padded positions zeroed."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] == 0:
            raise DataError(f"tokens must be [batch, steps], got {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.alphabet_size:
            raise DataError("token id outside alphabet")
        b, s = tokens.shape
        mask = (np.arange(s)[None, :] < np.asarray(token_lengths)[:, None]).astype(self.dtype)
        x = ops.embedding(self.token_emb, tokens)
        x = ops.mul(x, mask[:, :, None])
        for conv in self.enc_convs:
            x = ops.mul(ops.relu(conv(x)), mask[:, :, None])
        return ops.mul(self.enc_rnn(x, np.asarray(token_lengths)), mask[:, :, None])

    def _prenet(self, frame: Tensor, rng: np.random.Generator) -> Tensor:
        p = self.cfg.prenet_dropout
        h = ops.dropout(ops.relu(self.prenet1(frame)), p, rng)
        return ops.dropout(ops.relu(self.prenet2(h)), p, rng)

    def _decoder_states(self, batch: int):
        return self.att_rnn.zero_state(batch, self.dtype), self.dec_rnn.zero_state(batch, self.dtype)

    def _step(self, prev_frame, states, memory, memory_proj, prev_weights, mask_bias, rng):
        """One decoder step: returns (frames [B,r,n_mels], stop [B,r], weights [B,S], states)."""
        (h_att, c_att), (h_dec, c_dec) = states
        b = memory.shape[0]
        pre = self._prenet(prev_frame, rng)
        context_prev = ops.reshape(
            ops.matmul(ops.reshape(prev_weights, (b, 1, -1)), memory), (b, -1)
        )
        h_att, c_att = self.att_rnn(ops.concat([pre, context_prev], axis=-1), h_att, c_att)
        weights = self.attention(h_att, memory_proj, prev_weights, mask_bias)
        context = ops.reshape(ops.matmul(ops.reshape(weights, (b, 1, -1)), memory), (b, -1))
        h_dec, c_dec = self.dec_rnn(ops.concat([h_att, context], axis=-1), h_dec, c_dec)
        feat = ops.concat([h_dec, context], axis=-1)
        frames = ops.reshape(self.frame_proj(feat), (b, self.cfg.reduction, self.cfg.n_mels))
        stop = self.stop_proj(feat)
        return frames, stop, weights, ((h_att, c_att), (h_dec, c_dec))

    def _postnet(self, mel: Tensor) -> Tensor:
        x = mel
        for i, conv in enumerate(self.postnet):
            x = conv(x)
            if i < len(self.postnet) - 1:
                x = ops.tanh(x)
        return ops.add(mel, x)

    def predict_teacher_forced(
        self,
        tokens: np.ndarray,
        token_lengths: np.ndarray,
        target_mel: Tensor,
        emb: Tensor,
        rng: np.random.Generator,
    ):
        """Returns (pre_mel, post_mel, stop_logits, alignment [B,steps,S]).

        target_mel frame count must be a multiple of the reduction factor;
        outputs carry the same frame count.
        """
        r = self.cfg.reduction
        b, t_frames = target_mel.shape[0], target_mel.shape[1]
        if t_frames % r != 0 or t_frames == 0:
            raise DataError(f"frame count {t_frames} not a positive multiple of reduction {r}")
        memory = condition_encoder(self.encode(tokens, token_lengths), emb)
        memory_proj = self.attention.project_memory(memory)
        s = memory.shape[1]
        mask_bias = self._attention_bias(token_lengths, s)
        states = self._decoder_states(b)
        weights = Tensor(_one_hot_first(b, s, self.dtype))
        prev_frame = Tensor(np.zeros((b, self.cfg.n_mels), dtype=self.dtype))
        frames, stops, aligns = [], [], []
        for step in range(t_frames // r):
            out, stop, weights, states = self._step(
                prev_frame, states, memory, memory_proj, weights, mask_bias, rng
            )
            frames.append(out)
            stops.append(stop)
            aligns.append(weights)
            prev_frame = target_mel[:, (step + 1) * r - 1, :]
        pre_mel = ops.concat(frames, axis=1)
        post_mel = self._postnet(pre_mel)
        stop_logits = ops.concat(stops, axis=1)
        alignment = ops.stack(aligns, axis=1)
        return pre_mel, post_mel, stop_logits, alignment

    def generate(
        self,
        tokens: np.ndarray,
        emb: Tensor,
        max_frames: int,
        rng: np.random.Generator,
        stop_threshold: float = 0.5,
    ):
        """Autoregressive decoding for one utterance batch; returns
        (post_mel, alignment, stopped)."""
        from .numerics import no_grad

        r = self.cfg.reduction
        with no_grad():
            tokens = np.atleast_2d(np.asarray(tokens))
            b = tokens.shape[0]
            token_lengths = np.full(b, tokens.shape[1])
            memory = condition_encoder(self.encode(tokens, token_lengths), emb)
            memory_proj = self.attention.project_memory(memory)
            s = memory.shape[1]
            states = self._decoder_states(b)
            weights = Tensor(_one_hot_first(b, s, self.dtype))
            prev_frame = Tensor(np.zeros((b, self.cfg.n_mels), dtype=self.dtype))
            frames, aligns = [], []
            stopped = False
            for _ in range(max_frames // r):
                out, stop, weights, states = self._step(
                    prev_frame, states, memory, memory_proj, weights, None, rng
                )
                frames.append(out)
                aligns.append(weights)
                prev_frame = out[:, r - 1, :]
                stop_prob = 1.0 / (1.0 + np.exp(-stop.data))
                if np.all(stop_prob.max(axis=1) > stop_threshold):
                    stopped = True
                    break
            pre_mel = ops.concat(frames, axis=1)
            post_mel = self._postnet(pre_mel)
            alignment = ops.stack(aligns, axis=1)
        return post_mel.data, alignment.data, stopped

    def _attention_bias(self, token_lengths: np.ndarray, s: int) -> np.ndarray:
        mask = np.arange(s)[None, :] < np.asarray(token_lengths)[:, None]
        return np.where(mask, 0.0, -1e9).astype(self.dtype)


def _one_hot_first(b: int, s: int, dtype) -> np.ndarray:
    w = np.zeros((b, s), dtype=dtype)
    w[:, 0] = 1.0
    return w


def spectrum_loss(
    pre_mel: Tensor,
    post_mel: Tensor,
    stop_logits: Tensor,
    target_mel,
    stop_targets: np.ndarray,
    frame_mask: np.ndarray,
    params: dict | None = None,
    l2_weight: float = 0.0,
    stop_pos_weight: float = 5.0,
):
    """Masked MSE (pre and post) + weighted stop cross-entropy + L2 penalty.

    frame_mask is 1 on valid frames; stop supervision intentionally covers
    trailing padding too (label 1), teaching the decoder to hold "stop" after
    the end.  Returns (total, breakdown dict of floats).
    """
    from .numerics.optim import l2_penalty
    from .numerics.tensor import as_tensor

    target_mel = as_tensor(target_mel)
    mask = np.asarray(frame_mask, dtype=pre_mel.data.dtype)
    n_valid = float(mask.sum()) * pre_mel.shape[2]
    if n_valid == 0:
        raise DataError("no valid frames in batch")

    def masked_mse(pred):
        d = ops.sub(pred, target_mel)
        return ops.div(ops.sum_(ops.mul(ops.mul(d, d), mask[:, :, None])), n_valid)

    mse_pre = masked_mse(pre_mel)
    mse_post = masked_mse(post_mel)

    y = np.asarray(stop_targets, dtype=pre_mel.data.dtype)
    w = 1.0 + (stop_pos_weight - 1.0) * y
    z = stop_logits
    # stable binary cross-entropy with logits; |z| built from two relus
    abs_z = ops.add(ops.relu(z), ops.relu(ops.neg(z)))
    bce = ops.add(ops.sub(ops.relu(z), ops.mul(z, y)), ops.softplus(ops.neg(abs_z)))
    stop = ops.div(ops.sum_(ops.mul(bce, w)), float(y.size))

    total = ops.add(ops.add(mse_pre, mse_post), stop)
    breakdown = {
        "mse_pre": float(mse_pre.data),
        "mse_post": float(mse_post.data),
        "stop": float(stop.data),
        "l2": 0.0,
    }
    if params is not None and l2_weight > 0.0:
        pen = l2_penalty(params, l2_weight)
        if pen is not None:
            total = ops.add(total, pen)
            breakdown["l2"] = float(pen.data)
    breakdown["total"] = float(total.data)
    return total, breakdown


def stop_targets_for(frame_lengths: np.ndarray, t_frames: int) -> np.ndarray:
    """Label 1 from each row's final valid frame onward (padding included)."""
    idx = np.arange(t_frames)[None, :]
    return (idx >= np.asarray(frame_lengths)[:, None] - 1).astype(np.float32)


def frame_mask_for(frame_lengths: np.ndarray, t_frames: int) -> np.ndarray:
    return (np.arange(t_frames)[None, :] < np.asarray(frame_lengths)[:, None]).astype(np.float32)


def alignment_score(alignment: np.ndarray) -> tuple[float, float]:
    """(monotonicity, focus) for one [steps, S] matrix.

    Monotonicity: fraction of steps whose argmax does not move backward.
    Focus: mean per-step max weight.
    """
    a = np.asarray(alignment)
    if a.ndim != 2 or a.size == 0:
        raise DataError("alignment must be a non-empty [steps, S] matrix")
    arg = np.argmax(a, axis=1)
    if len(arg) == 1:
        mono = 1.0
    else:
        mono = float(np.mean(arg[1:] >= arg[:-1]))
    return mono, float(a.max(axis=1).mean())
