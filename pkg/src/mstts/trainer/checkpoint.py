"""Single-file checkpoint container.

Layout: magic ``MSTT``, format version u32, length-prefixed canonical JSON
header, u32 blob count, then name-sorted blobs of
(u32 name length, name utf-8, u32 ndim, u32 dims..., float32 data).
Everything little-endian.  The header carries kind, config fingerprint,
global step, optimizer scalars, EMA decay, RNG state, and speaker ids;
parameter tensors, Adam moments (``adam.m.``/``adam.v.`` prefixes), EMA
shadows (``ema.``), and normalization stats (``norm.``) all live in the one
blob table, which is what makes save -> load -> save byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..canon import canonical_json
from ..errors import CheckpointError
from ..numerics.optim import AdamState, EmaState
from ..numerics.tensor import Tensor

MAGIC = b"MSTT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str  # spectrum | vocoder
    config_fingerprint: str
    step: int
    params: dict  # name -> float32 ndarray
    rng_state: dict | None = None
    speaker_ids: list = field(default_factory=list)
    adam: AdamState | None = None
    ema: EmaState | None = None
    extra: dict = field(default_factory=dict)


def _blob_table(ckpt: Checkpoint) -> dict:
    blobs = {}
    for name, p in ckpt.params.items():
        data = p.data if isinstance(p, Tensor) else p
        blobs[name] = np.asarray(data, dtype=np.float32)
    if ckpt.adam is not None:
        for name, m in ckpt.adam.m.items():
            blobs[f"adam.m.{name}"] = np.asarray(m, dtype=np.float32)
        for name, v in ckpt.adam.v.items():
            blobs[f"adam.v.{name}"] = np.asarray(v, dtype=np.float32)
    if ckpt.ema is not None:
        for name, s in ckpt.ema.shadow.items():
            blobs[f"ema.{name}"] = np.asarray(s, dtype=np.float32)
    return blobs


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    if ckpt.kind not in ("spectrum", "vocoder"):
        raise CheckpointError(f"unknown model kind {ckpt.kind!r}")
    header = {
        "kind": ckpt.kind,
        "config_fingerprint": ckpt.config_fingerprint,
        "step": int(ckpt.step),
        "speaker_ids": list(ckpt.speaker_ids),
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "adam": None
        if ckpt.adam is None
        else {"t": int(ckpt.adam.t), "beta1": ckpt.adam.beta1,
              "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps},
        "ema_decay": None if ckpt.ema is None else ckpt.ema.decay,
    }
    head_bytes = canonical_json(header).encode("utf-8")
    blobs = _blob_table(ckpt)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(head_bytes)))
        f.write(head_bytes)
        f.write(struct.pack("<I", len(blobs)))
        for name in sorted(blobs):
            arr = blobs[name]
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path, expect_fingerprint: str | None = None,
                    override_fingerprint: bool = False) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    off = 4

    def u32():
        nonlocal off
        (v,) = struct.unpack_from("<I", raw, off)
        off += 4
        return v

    version = u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    head_len = u32()
    try:
        header = json.loads(raw[off : off + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    off += head_len
    n_blobs = u32()
    blobs = {}
    for _ in range(n_blobs):
        name_len = u32()
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        ndim = u32()
        shape = tuple(u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        blobs[name] = arr.copy()
    if off != len(raw):
        raise CheckpointError(f"{path} has {len(raw) - off} trailing bytes")

    fingerprint = header["config_fingerprint"]
    if expect_fingerprint is not None and fingerprint != expect_fingerprint:
        if not override_fingerprint:
            raise CheckpointError(
                f"config fingerprint mismatch: checkpoint {fingerprint[:12]}..., "
                f"expected {expect_fingerprint[:12]}... (pass override to load anyway)"
            )

    params, adam_m, adam_v, ema_shadow = {}, {}, {}, {}
    for name, arr in blobs.items():
        if name.startswith("adam.m."):
            adam_m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[len("adam.v."):]] = arr
        elif name.startswith("ema."):
            ema_shadow[name[len("ema."):]] = arr
        else:
            params[name] = arr
    adam = None
    if header.get("adam") is not None:
        a = header["adam"]
        adam = AdamState(beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
                         t=a["t"], m=adam_m, v=adam_v)
    ema = None
    if header.get("ema_decay") is not None:
        ema = EmaState(decay=header["ema_decay"], shadow=ema_shadow)
    return Checkpoint(
        kind=header["kind"],
        config_fingerprint=fingerprint,
        step=header["step"],
        params=params,
        rng_state=header.get("rng_state"),
        speaker_ids=header.get("speaker_ids", []),
        adam=adam,
        ema=ema,
        extra=header.get("extra", {}),
    )


def assign_params(model_params: dict, loaded: dict) -> None:
    """Copy loaded arrays into a model's parameter tensors, by name."""
    missing = sorted(set(model_params) - set(loaded))
    surplus = sorted(set(loaded) - set(model_params))
    if missing or surplus:
        raise CheckpointError(
            f"parameter name mismatch: missing {missing[:3]}, surplus {surplus[:3]}"
        )
    for name, p in model_params.items():
        arr = loaded[name]
        if p.data.shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: model {p.data.shape}, checkpoint {arr.shape}"
            )
        p.data[...] = arr.astype(p.data.dtype)


def param_diff(a: dict, b: dict) -> list[str]:
    """Names present in both dicts whose values differ, plus names present
    in only one; bitwise comparison."""
    out = []
    for name in sorted(set(a) | set(b)):
        if name not in a or name not in b:
            out.append(name)
            continue
        da = a[name].data if isinstance(a[name], Tensor) else a[name]
        db = b[name].data if isinstance(b[name], Tensor) else b[name]
        if da.shape != db.shape or not np.array_equal(da, db):
            out.append(name)
    return out
