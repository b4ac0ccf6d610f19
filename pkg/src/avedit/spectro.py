"""Signal-processing kernel: mel spectrograms, peak normalization,
SNR-controlled mixing, frame-aligned spectrogram segmenting and patch
(un)tokenization.

All functions are pure and operate on numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class SignalError(ValueError):
    """Raised on malformed signal inputs (empty, silent, bad geometry)."""


@dataclass(frozen=True)
class MelConfig:
    sample_rate_hz: int = 16000
    n_fft: int = 512
    hop: int = 125
    n_mels: int = 32
    fmin_hz: float = 50.0
    fmax_hz: float = 8000.0
    log_floor: float = -10.0


@dataclass(frozen=True)
class SegmentSpec:
    """Geometry tying T video frames to windows of an L-column spectrogram."""

    L: int
    T: int
    l: int

    def __post_init__(self) -> None:
        if not (0 < self.l <= self.L):
            raise SignalError(f"segment length {self.l} outside (0, {self.L}]")
        if self.T < 1:
            raise SignalError(f"frame count must be >= 1, got {self.T}")


@dataclass(frozen=True)
class PatchGrid:
    patch: int
    rows: int
    cols: int

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols


def peak_normalize(w: np.ndarray) -> np.ndarray:
    """Scale so max |sample| = 1; all-zero input is returned unchanged."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise SignalError("cannot normalize an empty waveform")
    peak = np.max(np.abs(w))
    if peak == 0.0:
        return w.copy()
    return w / peak


def mix_snr_alpha(snr_db: float) -> float:
    """Distractor scaling factor alpha = sqrt(10^(-SNR/10))."""
    return math.sqrt(10.0 ** (-snr_db / 10.0))


def mix_at_snr(target: np.ndarray, distractor: np.ndarray, snr_db: float) -> np.ndarray:
    """Peak-normalize both inputs, mix target + alpha*distractor, then
    peak-normalize the mixture again."""
    target = np.asarray(target, dtype=np.float64)
    distractor = np.asarray(distractor, dtype=np.float64)
    if target.shape != distractor.shape:
        raise SignalError(
            f"length mismatch: target {target.shape} vs distractor {distractor.shape}"
        )
    if target.size == 0:
        raise SignalError("cannot mix empty waveforms")
    if np.max(np.abs(target)) == 0.0 or np.max(np.abs(distractor)) == 0.0:
        raise SignalError("cannot mix silent waveforms")
    alpha = mix_snr_alpha(snr_db)
    mixed = peak_normalize(target) + alpha * peak_normalize(distractor)
    return peak_normalize(mixed)


def segment_bounds(spec: SegmentSpec, i: int) -> tuple[int, int]:
    """Raw (possibly out-of-range) column bounds of the audio window
    centered at frame i. start = floor(i*L/T - l/2), end = start + l."""
    if not (0 <= i < spec.T):
        raise SignalError(f"frame index {i} outside [0, {spec.T})")
    center = i * spec.L / spec.T
    start = math.floor(center - spec.l / 2)
    return start, start + spec.l


def extract_segment(mel: np.ndarray, spec: SegmentSpec, i: int) -> np.ndarray:
    """Extract the frame-i window; columns outside [0, L) are zero-padded
    so every segment has exactly l columns."""
    if mel.ndim != 2 or mel.shape[1] != spec.L:
        raise SignalError(f"mel shape {mel.shape} does not match L={spec.L}")
    start, end = segment_bounds(spec, i)
    out = np.zeros((mel.shape[0], spec.l), dtype=mel.dtype)
    lo = max(start, 0)
    hi = min(end, spec.L)
    if hi > lo:
        out[:, lo - start : hi - start] = mel[:, lo:hi]
    return out


def _hz_to_mel(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(cfg: MelConfig) -> np.ndarray:
    """Center frequency (Hz) of each triangular mel filter."""
    edges = _mel_to_hz(
        np.linspace(_hz_to_mel(cfg.fmin_hz), _hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    )
    return edges[1:-1]


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular unit-peak (HTK-style) mel filterbank [n_mels, n_fft//2+1]."""
    n_bins = cfg.n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * cfg.sample_rate_hz / cfg.n_fft
    edges = _mel_to_hz(
        np.linspace(_hz_to_mel(cfg.fmin_hz), _hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    )
    fb = np.zeros((cfg.n_mels, n_bins), dtype=np.float64)
    for m in range(cfg.n_mels):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        up = (fft_freqs - left) / (center - left)
        down = (right - fft_freqs) / (right - center)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def hz_to_band(cfg: MelConfig, freq_hz: float) -> int:
    """Index of the mel band whose center is nearest to freq_hz."""
    return int(np.argmin(np.abs(mel_band_centers(cfg) - freq_hz)))


def mel_spectrogram(w: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Log (natural) power mel spectrogram [n_mels, L], floored at
    cfg.log_floor. L = len(w) // hop; frames start at i*hop with the tail
    zero-padded, so identical input gives a bit-identical output."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise SignalError("waveform must be 1-D and non-empty")
    if w.size % cfg.hop != 0:
        raise SignalError(
            f"waveform length {w.size} not divisible by hop {cfg.hop}"
        )
    n_cols = w.size // cfg.hop
    padded = np.concatenate([w, np.zeros(cfg.n_fft, dtype=np.float64)])
    window = np.hanning(cfg.n_fft + 1)[:-1]
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop * np.arange(n_cols)[:, None]
    frames = padded[idx] * window
    spectrum = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    mel_power = mel_filterbank(cfg) @ spectrum.T
    with np.errstate(divide="ignore"):
        logmel = np.log(mel_power)
    return np.maximum(logmel, cfg.log_floor)


def patchify(x: np.ndarray, patch: int) -> tuple[np.ndarray, PatchGrid]:
    """Split [A, B] into row-major [N, patch*patch] patches."""
    if x.ndim != 2:
        raise SignalError(f"patchify expects a 2-D tensor, got shape {x.shape}")
    a, b = x.shape
    if a % patch or b % patch:
        raise SignalError(f"dims {x.shape} not divisible by patch size {patch}")
    rows, cols = a // patch, b // patch
    patches = (
        x.reshape(rows, patch, cols, patch)
        .transpose(0, 2, 1, 3)
        .reshape(rows * cols, patch * patch)
    )
    return patches, PatchGrid(patch=patch, rows=rows, cols=cols)


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Exact inverse of patchify."""
    if patches.shape != (grid.n_patches, grid.patch * grid.patch):
        raise SignalError(
            f"patch array shape {patches.shape} does not match grid {grid}"
        )
    p = grid.patch
    return (
        patches.reshape(grid.rows, grid.cols, p, p)
        .transpose(0, 2, 1, 3)
        .reshape(grid.rows * p, grid.cols * p)
    )
