"""Metric suite: a small convolutional probe classifier over log-mel
spectrograms plus Fréchet distance, KL distribution matching, Inception
Score, co-encoder semantic alignment, and a temporal-desync proxy, with a
benchmark evaluation report (JSON + markdown table)."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cavmae import MEL_SCALE, CavMae, extract_features
from .synthcorpus import AVClip, CorpusConfig, EditTask, EventScript

PROBE_ACCURACY_BAR = 0.9
DESYNC_WINDOW_S = 0.25
DESYNC_HOP_S = 0.125


class UntrustedProbeError(RuntimeError):
    """Raised when a metric is requested from a probe below the accuracy bar."""


class ProbeTrainingError(RuntimeError):
    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = history


class ProbeClassifier(nn.Module):
    """Multi-label conv classifier over normalized log-mels [B, 1, M, L];
    tolerates variable L (sliding windows) via global pooling."""

    def __init__(self, n_classes: int, feature_dim: int = 64):
        super().__init__()
        self.n_classes = n_classes
        self.feature_dim = feature_dim
        # Pool over time only: class identity lives in the frequency axis,
        # so the four residual frequency bins stay distinct.
        self.conv = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.GELU(),
            nn.AdaptiveAvgPool2d((4, 1)),
        )
        self.feature = nn.Linear(64 * 4, feature_dim)
        self.head = nn.Linear(feature_dim, n_classes)
        self.register_buffer("val_accuracy", torch.tensor(0.0))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv(x).flatten(1)
        return F.gelu(self.feature(h))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def prepare_mels(mels: list[np.ndarray] | np.ndarray) -> torch.Tensor:
    """Log-mel spectrograms -> probe input batch [B, 1, M, L]."""
    arr = np.stack([np.asarray(m, dtype=np.float64) for m in mels])
    return torch.from_numpy((arr / MEL_SCALE).astype(np.float32))[:, None]


def _require_trusted(probe: ProbeClassifier) -> None:
    acc = float(probe.val_accuracy)
    if acc < PROBE_ACCURACY_BAR:
        raise UntrustedProbeError(
            f"probe validation accuracy {acc:.3f} is below {PROBE_ACCURACY_BAR}"
        )


def window_labels(script: EventScript, n_classes: int, t0: float, t1: float,
                  min_coverage: float = 0.5) -> np.ndarray:
    """Multi-hot of audible classes covering >= min_coverage of [t0, t1)."""
    label = np.zeros(n_classes, dtype=np.float32)
    span = t1 - t0
    for ev in script.events:
        if not ev.audible:
            continue
        overlap = min(ev.offset_s, t1) - max(ev.onset_s, t0)
        if overlap >= min_coverage * span:
            label[ev.class_id] = 1.0
    return label


def clip_labels(script: EventScript, n_classes: int) -> np.ndarray:
    label = np.zeros(n_classes, dtype=np.float32)
    for ev in script.events:
        if ev.audible:
            label[ev.class_id] = 1.0
    return label


def _multilabel_accuracy(probe: ProbeClassifier, x: torch.Tensor,
                         y: torch.Tensor) -> float:
    with torch.no_grad():
        pred = torch.sigmoid(probe(x)) > 0.5
    return float((pred == (y > 0.5)).float().mean())


def train_probe(clips: list[tuple[np.ndarray, EventScript]], n_classes: int,
                seed: int, corpus_cfg: CorpusConfig = CorpusConfig(),
                epochs: int = 150, lr: float = 2e-3, batch_size: int = 16,
                windows_per_clip: int = 4, val_fraction: float = 0.25,
                accuracy_bar: float = PROBE_ACCURACY_BAR
                ) -> tuple[ProbeClassifier, list[float]]:
    """Train the probe on (log-mel, script) pairs. Training mixes whole
    clips, random sub-windows (labelled by local event coverage), and
    silence negatives so the sliding-window detector and silence
    calibration both behave."""
    if not clips:
        raise ValueError("empty probe training set")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    probe = ProbeClassifier(n_classes)

    cols_per_s = corpus_cfg.mel.sample_rate_hz / corpus_cfg.mel.hop
    win_cols = int(round(DESYNC_WINDOW_S * cols_per_s))
    full_x = prepare_mels([m for m, _ in clips])
    full_y = torch.from_numpy(
        np.stack([clip_labels(s, n_classes) for _, s in clips])
    )
    n_val = max(1, int(round(val_fraction * len(clips))))
    val_x, val_y = full_x[:n_val], full_y[:n_val]
    train_idx = np.arange(n_val, len(clips))
    if train_idx.size == 0:
        train_idx = np.arange(len(clips))

    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    silence = torch.full(
        (2, 1, corpus_cfg.mel.n_mels, win_cols),
        corpus_cfg.mel.log_floor / MEL_SCALE,
    )
    history: list[float] = []
    for _ in range(epochs):
        probe.train()
        order = rng.permutation(train_idx)
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            x = full_x[idx]
            y = full_y[idx]
            loss = F.binary_cross_entropy_with_logits(probe(x), y)
            # Superposition augmentation: the elementwise max of two
            # log-mels approximates their acoustic mixture, with the label
            # union. Covers class combinations absent from the corpus.
            perm = torch.from_numpy(rng.permutation(len(idx)))
            mixed = torch.maximum(x, x[perm])
            loss = loss + F.binary_cross_entropy_with_logits(
                probe(mixed), torch.maximum(y, y[perm])
            )
            # Circular time shifts leave the clip-level label set intact.
            shift = int(rng.integers(0, x.shape[-1]))
            loss = loss + F.binary_cross_entropy_with_logits(
                probe(torch.roll(x, shift, dims=-1)), y
            )
            # Random sub-windows with coverage labels.
            wx, wy = [], []
            for i in idx:
                mel, script = clips[int(i)]
                L = mel.shape[1]
                for _ in range(windows_per_clip):
                    start = int(rng.integers(0, L - win_cols + 1))
                    wx.append(mel[:, start : start + win_cols])
                    wy.append(window_labels(
                        script, n_classes, start / cols_per_s,
                        (start + win_cols) / cols_per_s,
                    ))
            loss = loss + F.binary_cross_entropy_with_logits(
                probe(prepare_mels(wx)), torch.from_numpy(np.stack(wy))
            )
            silence_logits = probe(silence)
            loss = loss + F.binary_cross_entropy_with_logits(
                silence_logits, torch.zeros(2, n_classes)
            )
            # Calibration: silence should look class-agnostic, so pull its
            # logits together, not just down.
            loss = loss + silence_logits.var(dim=-1).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        probe.eval()
        acc = _multilabel_accuracy(probe, val_x, val_y)
        history.append(acc)
        if acc >= accuracy_bar:
            break
    else:
        raise ProbeTrainingError(
            f"probe accuracy {history[-1]:.3f} below {accuracy_bar} after "
            f"{epochs} epochs",
            history,
        )
    with torch.no_grad():
        probe.val_accuracy.fill_(history[-1])
    probe.eval()
    return probe, history


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@torch.no_grad()
def probe_logits(probe: ProbeClassifier, mels: list[np.ndarray]) -> np.ndarray:
    probe.eval()
    return probe(prepare_mels(mels)).numpy().astype(np.float64)


@torch.no_grad()
def probe_features(probe: ProbeClassifier, mels: list[np.ndarray]) -> np.ndarray:
    probe.eval()
    return probe.features(prepare_mels(mels)).numpy().astype(np.float64)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_from_logits(target_logits: np.ndarray, generated_logits: np.ndarray
                   ) -> float:
    """Mean per-pair KL(softmax target || softmax generated)."""
    if target_logits.shape != generated_logits.shape:
        raise ValueError(
            f"shape mismatch: {target_logits.shape} vs {generated_logits.shape}"
        )
    p = _softmax(target_logits)
    q = _softmax(generated_logits)
    kl = np.sum(p * (np.log(p + 1e-12) - np.log(q + 1e-12)), axis=-1)
    return float(kl.mean())


def feature_kl(generated: list[np.ndarray], target: list[np.ndarray],
               probe: ProbeClassifier) -> float:
    _require_trusted(probe)
    if len(generated) != len(target):
        raise ValueError(f"{len(generated)} generated vs {len(target)} targets")
    return kl_from_logits(probe_logits(probe, target),
                          probe_logits(probe, generated))


def frechet_from_features(f_g: np.ndarray, f_t: np.ndarray,
                          eps: float = 1e-6) -> float:
    """FD = ||mu_g - mu_t||^2 + Tr(S_g + S_t - 2 (S_g S_t)^(1/2))."""
    f_g = np.atleast_2d(np.asarray(f_g, dtype=np.float64))
    f_t = np.atleast_2d(np.asarray(f_t, dtype=np.float64))
    mu_g, mu_t = f_g.mean(axis=0), f_t.mean(axis=0)
    s_g = np.atleast_2d(np.cov(f_g, rowvar=False))
    s_t = np.atleast_2d(np.cov(f_t, rowvar=False))
    diff = float(np.sum((mu_g - mu_t) ** 2))
    covmean, _ = scipy.linalg.sqrtm(s_g @ s_t, disp=False)
    if not np.isfinite(covmean).all() or np.abs(covmean.imag).max() > 1e-3:
        warnings.warn("matrix square root unstable; regularizing with eps*I")
        off = eps * np.eye(s_g.shape[0])
        covmean, _ = scipy.linalg.sqrtm((s_g + off) @ (s_t + off), disp=False)
    fd = diff + float(np.trace(s_g + s_t - 2.0 * covmean.real))
    return max(fd, 0.0)


def frechet_distance(generated: list[np.ndarray], target: list[np.ndarray],
                     probe: ProbeClassifier) -> float:
    _require_trusted(probe)
    return frechet_from_features(probe_features(probe, generated),
                                 probe_features(probe, target))


def inception_from_probs(probs: np.ndarray) -> float:
    """exp(mean_i KL(p(y|x_i) || mean_j p(y|x_j)))."""
    marginal = probs.mean(axis=0, keepdims=True)
    kl = np.sum(
        probs * (np.log(probs + 1e-12) - np.log(marginal + 1e-12)), axis=-1
    )
    return float(np.exp(kl.mean()))


def inception_score(generated: list[np.ndarray], probe: ProbeClassifier) -> float:
    _require_trusted(probe)
    return inception_from_probs(_softmax(probe_logits(probe, generated)))


@torch.no_grad()
def semantic_alignment(mels: list[np.ndarray], frames: list[np.ndarray],
                       cavmae: CavMae, corpus_cfg: CorpusConfig) -> float:
    """Mean cosine between the co-encoder's pooled audio and visual global
    tokens, scaled x100."""
    if len(mels) != len(frames):
        raise ValueError(f"{len(mels)} spectrograms vs {len(frames)} videos")
    scores = []
    for mel, frm in zip(mels, frames):
        clip = AVClip(
            script=None, frames=np.asarray(frm, dtype=np.float64),
            waveform=np.zeros(1), mel=np.asarray(mel, dtype=np.float64),
        )
        feats = extract_features(cavmae, clip, corpus_cfg)
        a = feats.pooled_global_audio
        v = feats.pooled_global_visual
        denom = np.linalg.norm(a) * np.linalg.norm(v)
        scores.append(float(np.dot(a, v) / denom) if denom > 0 else 0.0)
    return 100.0 * float(np.mean(scores))


def desync_proxy(mel: np.ndarray, script: EventScript, probe: ProbeClassifier,
                 corpus_cfg: CorpusConfig) -> float:
    """Mean |detected onset - scripted onset| in seconds over events that
    are both audible and visible; an undetected event contributes the
    analysis-window length."""
    _require_trusted(probe)
    mel = np.asarray(mel, dtype=np.float64)
    cols_per_s = corpus_cfg.mel.sample_rate_hz / corpus_cfg.mel.hop
    win = int(round(DESYNC_WINDOW_S * cols_per_s))
    hop = int(round(DESYNC_HOP_S * cols_per_s))
    starts = list(range(0, mel.shape[1] - win + 1, hop))
    windows = [mel[:, s : s + win] for s in starts]
    with torch.no_grad():
        probs = torch.sigmoid(probe(prepare_mels(windows))).numpy()
    errors = []
    for ev in script.events:
        if not (ev.audible and ev.visible):
            continue
        hit = np.flatnonzero(probs[:, ev.class_id] > 0.5)
        if hit.size == 0:
            errors.append(DESYNC_WINDOW_S)
        else:
            # A window first crosses 0.5 when the event covers about half
            # of it, so the onset sits near the window midpoint.
            detected = (starts[int(hit[0])] + win / 2.0) / cols_per_s
            errors.append(abs(detected - ev.onset_s))
    return float(np.mean(errors)) if errors else 0.0


# ---------------------------------------------------------------------------
# Benchmark evaluation report
# ---------------------------------------------------------------------------

METRIC_KEYS = ("fd", "kl", "is", "semantic_align", "desync_s")
OPERATIONS = ("add", "remove", "replace")


@dataclass
class MetricReport:
    """Per-operation and overall metrics for the edited outputs and the
    corrupted-input baseline. KL / semantic alignment / desync aggregate as
    arithmetic means over tasks; FD and IS are computed on pooled sets."""

    rows: dict
    counts: dict
    schema_version: int = 1

    def to_json(self) -> str:
        return json.dumps(
            {"schema_version": self.schema_version, "counts": self.counts,
             "rows": self.rows},
            sort_keys=True, indent=2,
        )

    @classmethod
    def from_json(cls, blob: str) -> "MetricReport":
        data = json.loads(blob)
        return cls(rows=data["rows"], counts=data["counts"],
                   schema_version=data["schema_version"])

    def markdown_table(self) -> str:
        header = "| Setting | Op | FD | KL | IS | Align | DeSync (s) |"
        rule = "|---|---|---|---|---|---|---|"
        lines = [header, rule]
        for setting in ("baseline", "edited"):
            for op in (*OPERATIONS, "overall"):
                m = self.rows[setting][op]
                lines.append(
                    f"| {setting} | {op} | {m['fd']:.3f} | {m['kl']:.3f} | "
                    f"{m['is']:.3f} | {m['semantic_align']:.2f} | "
                    f"{m['desync_s']:.3f} |"
                )
        return "\n".join(lines)


def _metric_row(gen_mels, tgt_mels, frames, scripts, probe, cavmae,
                corpus_cfg) -> dict:
    desync = [desync_proxy(m, s, probe, corpus_cfg)
              for m, s in zip(gen_mels, scripts)]
    return {
        "fd": frechet_distance(gen_mels, tgt_mels, probe),
        "kl": feature_kl(gen_mels, tgt_mels, probe),
        "is": inception_score(gen_mels, probe),
        "semantic_align": semantic_alignment(gen_mels, frames, cavmae,
                                             corpus_cfg),
        "desync_s": float(np.mean(desync)),
    }


def evaluate_benchmark(edited_mels: dict[str, np.ndarray],
                       tasks: list[EditTask], target_mels: dict[str, np.ndarray],
                       input_mels: dict[str, np.ndarray],
                       probe: ProbeClassifier, cavmae: CavMae,
                       corpus_cfg: CorpusConfig) -> MetricReport:
    """Score edited outputs against pristine targets per operation, with
    the corrupted-input baseline row; mels keyed by task id."""
    _require_trusted(probe)
    for task in tasks:
        if task.task_id not in edited_mels:
            raise ValueError(f"no edited output for task {task.task_id}")
    rows = {"baseline": {}, "edited": {}}
    counts = {}
    groups = {op: [t for t in tasks if t.operation == op] for op in OPERATIONS}
    groups["overall"] = list(tasks)
    for op, members in groups.items():
        if op != "overall":
            counts[op] = len(members)
        if not members:
            continue
        tgt = [target_mels[t.task_id] for t in members]
        frames = [t.frames for t in members]
        scripts = [t.pristine_script for t in members]
        rows["baseline"][op] = _metric_row(
            [input_mels[t.task_id] for t in members], tgt, frames, scripts,
            probe, cavmae, corpus_cfg,
        )
        rows["edited"][op] = _metric_row(
            [edited_mels[t.task_id] for t in members], tgt, frames, scripts,
            probe, cavmae, corpus_cfg,
        )
    return MetricReport(rows=rows, counts=counts)
