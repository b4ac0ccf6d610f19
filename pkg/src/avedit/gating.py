"""Correlation-based feature gating: per-frame audio/visual cosine
similarity, median-calibrated threshold, and null substitution of
visually irrelevant audio features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GateConfig:
    r: float = 0.3
    null_audio_embedding: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not (-1.0 <= self.r <= 1.0):
            raise ValueError(f"threshold must lie in [-1, 1], got {self.r}")


def frame_similarity(f_a: np.ndarray, f_v: np.ndarray) -> np.ndarray:
    """Cosine similarity per frame; zero rows score 0 by convention."""
    f_a = np.asarray(f_a, dtype=np.float64)
    f_v = np.asarray(f_v, dtype=np.float64)
    if f_a.shape != f_v.shape:
        raise ValueError(f"shape mismatch: {f_a.shape} vs {f_v.shape}")
    na = np.linalg.norm(f_a, axis=1)
    nv = np.linalg.norm(f_v, axis=1)
    denom = na * nv
    sims = np.zeros(f_a.shape[0])
    live = denom > 0
    sims[live] = np.sum(f_a[live] * f_v[live], axis=1) / denom[live]
    return sims


def calibrate_threshold(all_sims: list[np.ndarray] | np.ndarray) -> float:
    """Exact median of every per-frame similarity across the corpus."""
    if isinstance(all_sims, (list, tuple)):
        if not all_sims:
            raise ValueError("cannot calibrate on an empty corpus")
        flat = np.concatenate([np.asarray(s).ravel() for s in all_sims])
    else:
        flat = np.asarray(all_sims).ravel()
    if flat.size == 0:
        raise ValueError("cannot calibrate on an empty corpus")
    return float(np.median(flat))


def gate_features(f_a: np.ndarray, sims: np.ndarray, r: float,
                  null_embedding: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Keep rows with sims > r (strict); replace the rest with the null
    embedding. Returns (gated features, kept mask)."""
    f_a = np.asarray(f_a)
    sims = np.asarray(sims)
    if sims.shape[0] != f_a.shape[0]:
        raise ValueError(f"{sims.shape[0]} sims for {f_a.shape[0]} frames")
    null_embedding = np.asarray(null_embedding, dtype=f_a.dtype)
    if null_embedding.shape != f_a.shape[1:]:
        raise ValueError(
            f"null embedding shape {null_embedding.shape} vs rows {f_a.shape[1:]}"
        )
    kept = sims > r
    gated = np.where(kept[:, None], f_a, null_embedding[None, :])
    return gated, kept
