"""Figures and delimited output for run directories.

Every plotting function writes one PNG and returns its path; CSV siblings
are written by the callers (or here, where the data is already at hand).
Rendering is headless.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError


def write_csv(path, rows: list, fieldnames: list) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(rows)
    return path


def loss_figure(rows: list, path) -> Path:
    """Loss components over steps; spectrum and vocoder rows both work."""
    if not rows:
        raise DataError("no loss rows to plot")
    path = Path(path)
    steps = [r["step"] for r in rows]
    series = [k for k in rows[0] if k not in ("step", "lr")]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in series:
        ax.plot(steps, [r[key] for r in rows], label=key, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def projection_figure(coords: np.ndarray, speaker_ids: list, path,
                      title: str = "speaker embeddings") -> Path:
    """2-D embedding scatter, one color per speaker."""
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DataError(f"need [N, 2] coordinates, got {coords.shape}")
    if len(speaker_ids) != coords.shape[0]:
        raise DataError("one speaker id per point required")
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 5))
    speakers = sorted(set(speaker_ids))
    cmap = plt.get_cmap("tab10")
    for i, spk in enumerate(speakers):
        mask = np.array([s == spk for s in speaker_ids])
        ax.scatter(coords[mask, 0], coords[mask, 1], s=14,
                   color=cmap(i % 10), label=spk, alpha=0.8)
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def projection_csv(coords: np.ndarray, speaker_ids: list, utt_ids: list,
                   path, kinds: list | None = None) -> Path:
    """Header utt_id,speaker_id,kind,x,y; kind is real or synth."""
    if kinds is None:
        kinds = ["real"] * len(utt_ids)
    rows = [
        {"utt_id": u, "speaker_id": s, "kind": k,
         "x": float(c[0]), "y": float(c[1])}
        for u, s, k, c in zip(utt_ids, speaker_ids, kinds, np.asarray(coords))
    ]
    return write_csv(path, rows, ["utt_id", "speaker_id", "kind", "x", "y"])


def alignment_figure(alignment: np.ndarray, path,
                     title: str = "attention alignment") -> Path:
    """Decoder-step x token heatmap."""
    a = np.asarray(alignment)
    if a.ndim != 2 or a.size == 0:
        raise DataError("alignment must be a non-empty 2-D matrix")
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(a.T, aspect="auto", origin="lower", cmap="magma",
                   interpolation="nearest")
    ax.set_xlabel("decoder step")
    ax.set_ylabel("token position")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def adaptation_figure(rows: list, path) -> Path:
    """Per-utterance similarity before and after adaptation."""
    if not rows:
        raise DataError("no adaptation rows to plot")
    path = Path(path)
    idx = np.arange(len(rows))
    pre = [r["pre_similarity"] for r in rows]
    post = [r["post_similarity"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.4
    ax.bar(idx - width / 2, pre, width, label="before", color="#888888")
    ax.bar(idx + width / 2, post, width, label="after", color="#2b7bba")
    ax.set_xticks(idx)
    ax.set_xticklabels([r["utt_id"] for r in rows], rotation=60, fontsize=6)
    ax.set_ylabel("cosine to target centroid")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def scaling_figure(rows: list, path) -> Path:
    """Mel distance against training-data fraction."""
    if not rows:
        raise DataError("no scaling rows to plot")
    path = Path(path)
    fracs = [r["fraction"] for r in rows]
    dists = [r["mel_distance"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(fracs, dists, marker="o")
    ax.set_xlabel("training data fraction")
    ax.set_ylabel("DTW mel distance")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def evaluation_figure(rows: list, path) -> Path:
    """Per-utterance mel distance, shaded by whether the speaker was right."""
    if not rows:
        raise DataError("no evaluation rows to plot")
    path = Path(path)
    idx = np.arange(len(rows))
    dists = [r["mel_distance"] for r in rows]
    colors = ["#2b7bba" if r["correct"] else "#c44e52" for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(idx, dists, color=colors)
    ax.set_xticks(idx)
    ax.set_xticklabels([r["utt_id"] for r in rows], rotation=60, fontsize=6)
    ax.set_ylabel("DTW mel distance")
    ax.set_title("blue: speaker identified, red: missed")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def mel_figure(mel: np.ndarray, path, title: str = "mel spectrogram") -> Path:
    m = np.asarray(mel)
    if m.ndim != 2 or m.size == 0:
        raise DataError("mel must be a non-empty [T, n_mels] matrix")
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 3))
    im = ax.imshow(m.T, aspect="auto", origin="lower", cmap="viridis",
                   interpolation="nearest")
    ax.set_xlabel("frame")
    ax.set_ylabel("mel band")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
