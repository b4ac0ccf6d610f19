"""Contrastive masked audio-visual co-encoder.

Per-frame visual patch grids are paired with fixed-width windows of the
mel spectrogram, masked, encoded by modality-specific transformers and a
three-stream joint encoder (one weight-shared block stack with
stream-specific layer norms), and decoded jointly for masked-patch
reconstruction. Per-modality global tokens carry the contrastive
objective. An audio-mixing augmentation trains the joint stream to
reconstruct the clean signal from a distractor-contaminated one.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from .spectro import SegmentSpec, extract_segment, mel_spectrogram, mix_at_snr, patchify
from .synthcorpus import AVClip, CorpusConfig

MEL_SCALE = 10.0  # log-mel values live in ~[-10, 10]; inputs are mel/MEL_SCALE


@dataclass(frozen=True)
class CavMaeConfig:
    d_model: int = 128
    heads: int = 4
    depth_single: int = 4
    depth_joint: int = 2
    depth_decoder: int = 2
    decoder_dim: int = 64
    mlp_ratio: float = 4.0
    patch: int = 16
    visual_grid: tuple[int, int] = (4, 4)
    audio_grid: tuple[int, int] = (2, 3)
    audio_grid_full: tuple[int, int] = (2, 16)
    mask_ratio: float = 0.5
    tau: float = 0.05
    lambda_c: float = 0.01
    lambda_mae: float = 1.0
    symmetric_contrastive: bool = False

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch

    def to_dict(self) -> dict:
        return asdict(self)


class MaskedTokens(NamedTuple):
    kept: torch.Tensor  # [B, N_kept, d]
    kept_idx: torch.Tensor  # [B, N_kept]
    masked_idx: torch.Tensor  # [B, N_masked]


class JointOutput(NamedTuple):
    e_v_joint: torch.Tensor  # joint-stream visual half
    e_m_joint: torch.Tensor  # joint-stream (mixed-)audio half
    e_v_single: torch.Tensor  # single-modal visual stream through joint blocks
    e_a_single: torch.Tensor  # single-modal clean-audio stream


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.ln2(x))


class JointBlock(nn.Module):
    """Transformer block shared across the three joint-encoder streams;
    only the layer norms are stream-specific."""

    STREAMS = ("av", "v", "a")

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.ln1 = nn.ModuleDict({s: nn.LayerNorm(dim) for s in self.STREAMS})
        self.ln2 = nn.ModuleDict({s: nn.LayerNorm(dim) for s in self.STREAMS})

    def forward(self, x: torch.Tensor, stream: str) -> torch.Tensor:
        h = self.ln1[stream](x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.ln2[stream](x))


def apply_mask(tokens: torch.Tensor, ratio: float,
               seed: int | torch.Generator) -> MaskedTokens:
    """Uniformly random mask of round(ratio*N) tokens per item."""
    if not (0.0 <= ratio < 1.0):
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    if isinstance(seed, torch.Generator):
        gen = seed
    else:
        gen = torch.Generator().manual_seed(int(seed))
    b, n, d = tokens.shape
    n_masked = int(round(ratio * n))
    perms = torch.stack([torch.randperm(n, generator=gen) for _ in range(b)])
    kept_idx, _ = perms[:, : n - n_masked].sort(dim=1)
    masked_idx, _ = perms[:, n - n_masked :].sort(dim=1)
    kept = tokens.gather(1, kept_idx.unsqueeze(-1).expand(-1, -1, d))
    return MaskedTokens(kept=kept, kept_idx=kept_idx, masked_idx=masked_idx)


def mask_gather(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return x.gather(1, idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]))


class CavMae(nn.Module):
    def __init__(self, cfg: CavMaeConfig):
        super().__init__()
        self.cfg = cfg
        d, pd = cfg.d_model, cfg.patch_dim
        self.proj_v = nn.Linear(pd, d)
        self.proj_a = nn.Linear(pd, d)
        vr, vc = cfg.visual_grid
        ar, ac = cfg.audio_grid_full
        self.pos_v = nn.Parameter(0.02 * torch.randn(vr, vc, d))
        self.pos_a = nn.Parameter(0.02 * torch.randn(ar, ac, d))
        self.mod_v = nn.Parameter(0.02 * torch.randn(d))
        self.mod_a = nn.Parameter(0.02 * torch.randn(d))
        self.global_v = nn.Parameter(0.02 * torch.randn(d))
        self.global_a = nn.Parameter(0.02 * torch.randn(d))
        self.enc_v = nn.ModuleList(
            Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth_single)
        )
        self.enc_a = nn.ModuleList(
            Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth_single)
        )
        self.joint = nn.ModuleList(
            JointBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth_joint)
        )
        dd = cfg.decoder_dim
        self.dec_embed = nn.Linear(d, dd)
        self.dec_mask_token = nn.Parameter(0.02 * torch.randn(dd))
        self.dec_pos_v = nn.Parameter(0.02 * torch.randn(vr, vc, dd))
        self.dec_pos_a = nn.Parameter(0.02 * torch.randn(ar, ac, dd))
        self.dec_mod_v = nn.Parameter(0.02 * torch.randn(dd))
        self.dec_mod_a = nn.Parameter(0.02 * torch.randn(dd))
        self.dec_blocks = nn.ModuleList(
            Block(dd, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth_decoder)
        )
        self.dec_norm = nn.LayerNorm(dd)
        self.head_v = nn.Linear(dd, pd)
        self.head_a = nn.Linear(dd, pd)

    def _pos(self, table: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        r, c = grid
        if r > table.shape[0] or c > table.shape[1]:
            raise ValueError(f"grid {grid} exceeds positional table {tuple(table.shape[:2])}")
        return table[:r, :c].reshape(r * c, -1)

    def embed(self, modality: str, raw_patches: torch.Tensor,
              grid: tuple[int, int]) -> torch.Tensor:
        """Project raw patches and add positional + modality embeddings."""
        if modality == "visual":
            proj, table, mod = self.proj_v, self.pos_v, self.mod_v
        elif modality == "audio":
            proj, table, mod = self.proj_a, self.pos_a, self.mod_a
        else:
            raise ValueError(f"unknown modality {modality!r}")
        pos = self._pos(table, grid)
        if raw_patches.shape[-2] != pos.shape[0]:
            raise ValueError(
                f"{raw_patches.shape[-2]} patches do not fill grid {grid}"
            )
        return proj(raw_patches) + pos + mod

    def encode_single(self, tokens: torch.Tensor, modality: str) -> torch.Tensor:
        """Run the modality's ViT over kept tokens with the global token
        prepended at position 0."""
        g = self.global_v if modality == "visual" else self.global_a
        blocks = self.enc_v if modality == "visual" else self.enc_a
        b = tokens.shape[0]
        x = torch.cat([g.expand(b, 1, -1), tokens], dim=1)
        for blk in blocks:
            x = blk(x)
        return x

    def encode_joint(self, e_v: torch.Tensor, e_a: torch.Tensor,
                     e_m: torch.Tensor) -> JointOutput:
        """Three-stream joint encoding: concat(visual, mixed-audio) through
        the shared blocks with 'av' norms; visual and clean-audio streams
        through the same blocks with their own norms."""
        if e_v.shape[0] != e_a.shape[0] or e_a.shape != e_m.shape:
            raise ValueError("stream batch/shape mismatch in joint encoder")
        n_v = e_v.shape[1]
        x_av = torch.cat([e_v, e_m], dim=1)
        x_v, x_a = e_v, e_a
        for blk in self.joint:
            x_av = blk(x_av, "av")
            x_v = blk(x_v, "v")
            x_a = blk(x_a, "a")
        return JointOutput(
            e_v_joint=x_av[:, :n_v],
            e_m_joint=x_av[:, n_v:],
            e_v_single=x_v,
            e_a_single=x_a,
        )

    def _dec_scatter(self, patches: torch.Tensor, kept_idx: torch.Tensor,
                     grid: tuple[int, int], pos_table: torch.Tensor,
                     mod: torch.Tensor) -> torch.Tensor:
        b, _, dd = patches.shape
        n = grid[0] * grid[1]
        full = self.dec_mask_token.expand(b, n, dd).clone()
        full = full.scatter(1, kept_idx.unsqueeze(-1).expand(-1, -1, dd), patches)
        return full + self._pos(pos_table, grid) + mod

    def decode(self, e_v_joint: torch.Tensor, e_m_joint: torch.Tensor,
               v_kept_idx: torch.Tensor, a_kept_idx: torch.Tensor,
               v_grid: tuple[int, int], a_grid: tuple[int, int]
               ) -> tuple[torch.Tensor, torch.Tensor]:
        """Joint decoder: re-insert mask tokens, decode the concatenated
        streams, and predict raw patches for both modalities."""
        v = self.dec_embed(e_v_joint[:, 1:])  # drop global tokens
        a = self.dec_embed(e_m_joint[:, 1:])
        v_full = self._dec_scatter(v, v_kept_idx, v_grid, self.dec_pos_v, self.dec_mod_v)
        a_full = self._dec_scatter(a, a_kept_idx, a_grid, self.dec_pos_a, self.dec_mod_a)
        x = torch.cat([v_full, a_full], dim=1)
        for blk in self.dec_blocks:
            x = blk(x)
        x = self.dec_norm(x)
        n_v = v_full.shape[1]
        return self.head_v(x[:, :n_v]), self.head_a(x[:, n_v:])


def contrastive_loss(e_a: torch.Tensor, e_v: torch.Tensor, tau: float,
                     symmetric: bool = False) -> torch.Tensor:
    """InfoNCE over L2-normalized rows; diagonal entries are positives."""
    for name, x in (("first", e_a), ("second", e_v)):
        norms = x.norm(dim=1)
        if torch.any(norms == 0):
            raise ValueError(f"zero-norm row in {name} embedding set")
    a = e_a / e_a.norm(dim=1, keepdim=True)
    v = e_v / e_v.norm(dim=1, keepdim=True)
    sims = a @ v.T / tau
    loss = -(sims.diagonal() - sims.logsumexp(dim=1)).mean()
    if symmetric:
        loss_t = -(sims.diagonal() - sims.logsumexp(dim=0)).mean()
        loss = 0.5 * (loss + loss_t)
    return loss


def patch_normalize(patches: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    mean = patches.mean(dim=-1, keepdim=True)
    var = patches.var(dim=-1, keepdim=True, unbiased=False)
    return (patches - mean) / torch.sqrt(var + eps)


def masked_recon_error(recon: torch.Tensor, target: torch.Tensor,
                       masked_idx: torch.Tensor) -> torch.Tensor:
    """Mean squared error over masked patches against per-patch
    standardized targets."""
    if masked_idx.shape[1] == 0:
        return recon.new_zeros(())
    r = mask_gather(recon, masked_idx)
    t = patch_normalize(mask_gather(target, masked_idx))
    return ((r - t) ** 2).mean(dim=(1, 2)).mean()


def mae_loss(recon_v: torch.Tensor | None, target_v: torch.Tensor | None,
             v_masked_idx: torch.Tensor | None,
             recon_a: torch.Tensor | None, target_a: torch.Tensor | None,
             a_masked_idx: torch.Tensor | None) -> torch.Tensor:
    terms = []
    if recon_v is not None and v_masked_idx is not None and v_masked_idx.shape[1]:
        terms.append(masked_recon_error(recon_v, target_v, v_masked_idx))
    if recon_a is not None and a_masked_idx is not None and a_masked_idx.shape[1]:
        terms.append(masked_recon_error(recon_a, target_a, a_masked_idx))
    if not terms:
        raise ValueError("no masked patches in either modality")
    return sum(terms)


def total_loss(l_c: torch.Tensor | float, l_mae: torch.Tensor | float,
               cfg: CavMaeConfig) -> torch.Tensor | float:
    return cfg.lambda_c * l_c + cfg.lambda_mae * l_mae


def forward_losses(model: CavMae, v_patches: torch.Tensor,
                   a_patches: torch.Tensor, m_patches: torch.Tensor,
                   v_grid: tuple[int, int], a_grid: tuple[int, int],
                   mask_ratio: float, gen: torch.Generator) -> dict:
    """One full pretraining forward pass; clean and mixed audio share the
    mask positions and the audio encoder."""
    cfg = model.cfg
    emb_v = model.embed("visual", v_patches, v_grid)
    emb_a = model.embed("audio", a_patches, a_grid)
    emb_m = model.embed("audio", m_patches, a_grid)
    mv = apply_mask(emb_v, mask_ratio, gen)
    ma = apply_mask(emb_a, mask_ratio, gen)
    m_kept = mask_gather(emb_m, ma.kept_idx)

    e_v = model.encode_single(mv.kept, "visual")
    both = model.encode_single(torch.cat([ma.kept, m_kept], dim=0), "audio")
    e_a, e_m = both.split(ma.kept.shape[0], dim=0)
    joint = model.encode_joint(e_v, e_a, e_m)
    recon_v, recon_a = model.decode(
        joint.e_v_joint, joint.e_m_joint, mv.kept_idx, ma.kept_idx, v_grid, a_grid
    )
    l_mae_v = masked_recon_error(recon_v, v_patches, mv.masked_idx)
    l_mae_a = masked_recon_error(recon_a, a_patches, ma.masked_idx)
    l_c = contrastive_loss(
        joint.e_a_single[:, 0], joint.e_v_single[:, 0], cfg.tau,
        cfg.symmetric_contrastive,
    )
    l_mae = l_mae_v + l_mae_a
    return {
        "contrastive": l_c,
        "mae_visual": l_mae_v,
        "mae_audio": l_mae_a,
        "mae": l_mae,
        "total": total_loss(l_c, l_mae, cfg),
        "joint": joint,
    }


class ClipTensors(NamedTuple):
    frames_patches: np.ndarray  # [T, Nv, patch_dim]
    mel_norm: np.ndarray  # [M, L]
    waveform: np.ndarray


def prepare_clip(clip: AVClip, corpus_cfg: CorpusConfig) -> ClipTensors:
    patch = corpus_cfg.patch
    frames = np.stack(
        [patchify(f, patch)[0] for f in np.asarray(clip.frames, dtype=np.float64)]
    )
    return ClipTensors(
        frames_patches=frames.astype(np.float32),
        mel_norm=(np.asarray(clip.mel, dtype=np.float64) / MEL_SCALE).astype(np.float32),
        waveform=np.asarray(clip.waveform, dtype=np.float64),
    )


class CavMaeTrainer:
    """Seeded single-threaded pretraining loop."""

    def __init__(self, model: CavMae, clips: list[ClipTensors],
                 corpus_cfg: CorpusConfig, seed: int, lr: float = 1e-4,
                 mix_prob: float = 0.5, mask_ratio: float | None = None,
                 batch_clips: int = 8, frames_per_clip: int = 4,
                 decay_start: int = 0, decay_every: int = 0,
                 segmenting: bool = True):
        if not clips:
            raise ValueError("empty training corpus")
        self.model = model
        self.clips = clips
        self.corpus_cfg = corpus_cfg
        self.mix_prob = mix_prob
        self.mask_ratio = model.cfg.mask_ratio if mask_ratio is None else mask_ratio
        self.batch_clips = batch_clips
        self.frames_per_clip = frames_per_clip
        self.segmenting = segmenting
        self.base_lr = lr
        self.decay_start = decay_start
        self.decay_every = decay_every
        self.rng = np.random.default_rng(seed)
        self.gen = torch.Generator().manual_seed(seed)
        self.opt = torch.optim.Adam(model.parameters(), lr=lr)
        self.step_count = 0
        self.history: list[dict] = []
        self.seg_spec = SegmentSpec(
            L=corpus_cfg.mel_cols, T=corpus_cfg.n_frames, l=corpus_cfg.segment_cols
        )
        self.frame_probs = [self._frame_probs(c) for c in clips]

    def _frame_probs(self, clip: ClipTensors) -> np.ndarray:
        """Audio-energy-biased frame sampling distribution.

        Quiet frames pair a blank image with a near-silent window; as
        contrastive positives they carry no class information and drag the
        alignment toward a collapsed silence direction, so frames are drawn
        proportionally to their window's energy above the clip floor, with a
        uniform floor keeping every frame reachable."""
        T = self.seg_spec.T
        energy = np.array([
            float(extract_segment(clip.mel_norm, self.seg_spec, i).mean())
            for i in range(T)
        ])
        spread = energy - energy.min()
        total = spread.sum()
        biased = spread / total if total > 0 else np.full(T, 1.0 / T)
        return 0.25 / T + 0.75 * biased

    def _current_lr(self) -> float:
        if self.decay_every <= 0 or self.step_count < self.decay_start:
            return self.base_lr
        halvings = 1 + (self.step_count - self.decay_start) // self.decay_every
        return self.base_lr * 0.5**halvings

    def _mixed_mel(self, clip: ClipTensors) -> np.ndarray:
        others = [c for c in self.clips if c is not clip] or [clip]
        distractor = others[int(self.rng.integers(len(others)))]
        snr = float(self.rng.uniform(-5.0, 15.0))
        mixed = mix_at_snr(clip.waveform, distractor.waveform, snr)
        return (mel_spectrogram(mixed, self.corpus_cfg.mel) / MEL_SCALE).astype(np.float32)

    def _sample_batch(self):
        cfg = self.model.cfg
        patch = self.corpus_cfg.patch
        idx = self.rng.integers(len(self.clips), size=self.batch_clips)
        v_list, a_list, m_list = [], [], []
        for ci in idx:
            clip = self.clips[int(ci)]
            mel = clip.mel_norm
            mixed = (
                self._mixed_mel(clip)
                if self.mix_prob > 0 and self.rng.random() < self.mix_prob
                else mel
            )
            if self.segmenting:
                frames = self.rng.choice(
                    self.corpus_cfg.n_frames, size=self.frames_per_clip,
                    p=self.frame_probs[int(ci)],
                )
                for fi in frames:
                    fi = int(fi)
                    v_list.append(clip.frames_patches[fi])
                    seg = extract_segment(mel, self.seg_spec, fi)
                    a_list.append(patchify(seg, patch)[0])
                    m_list.append(patchify(extract_segment(mixed, self.seg_spec, fi), patch)[0])
            else:
                # Whole-clip pairing baseline: one random frame stands in
                # for the full video.
                fi = int(self.rng.integers(self.corpus_cfg.n_frames))
                v_list.append(clip.frames_patches[fi])
                a_list.append(patchify(mel, patch)[0])
                m_list.append(patchify(mixed, patch)[0])
        to_t = lambda xs: torch.from_numpy(np.stack(xs).astype(np.float32))
        a_grid = cfg.audio_grid if self.segmenting else cfg.audio_grid_full
        return to_t(v_list), to_t(a_list), to_t(m_list), a_grid

    def step(self) -> dict:
        self.model.train()
        v, a, m, a_grid = self._sample_batch()
        for group in self.opt.param_groups:
            group["lr"] = self._current_lr()
        losses = forward_losses(
            self.model, v, a, m, self.model.cfg.visual_grid, a_grid,
            self.mask_ratio, self.gen,
        )
        self.opt.zero_grad()
        losses["total"].backward()
        self.opt.step()
        self.step_count += 1
        record = {
            "step": self.step_count,
            "contrastive": float(losses["contrastive"].detach()),
            "mae_visual": float(losses["mae_visual"].detach()),
            "mae_audio": float(losses["mae_audio"].detach()),
            "total": float(losses["total"].detach()),
        }
        self.history.append(record)
        return record

    def train(self, n_steps: int) -> list[dict]:
        for _ in range(n_steps):
            self.step()
        return self.history


@dataclass
class EncoderOutput:
    per_frame_visual: np.ndarray  # [T, d]
    per_frame_audio: np.ndarray  # [T, d]
    global_visual: np.ndarray  # [T, d]
    global_audio: np.ndarray  # [T, d]

    @property
    def pooled_global_visual(self) -> np.ndarray:
        return self.global_visual.mean(axis=0)

    @property
    def pooled_global_audio(self) -> np.ndarray:
        return self.global_audio.mean(axis=0)


@torch.no_grad()
def extract_features(model: CavMae, clip: AVClip,
                     corpus_cfg: CorpusConfig) -> EncoderOutput:
    """Unmasked per-frame encoding: each frame with its audio window, mean
    pooled over patch tokens; global tokens kept separately."""
    model.eval()
    cfg = model.cfg
    tensors = prepare_clip(clip, corpus_cfg)
    spec = SegmentSpec(
        L=corpus_cfg.mel_cols, T=corpus_cfg.n_frames, l=corpus_cfg.segment_cols
    )
    if tensors.frames_patches.shape[0] != spec.T:
        raise ValueError(
            f"clip has {tensors.frames_patches.shape[0]} frames, expected {spec.T}"
        )
    patch = corpus_cfg.patch
    segs = np.stack(
        [patchify(extract_segment(tensors.mel_norm, spec, i), patch)[0]
         for i in range(spec.T)]
    )
    v = torch.from_numpy(tensors.frames_patches.astype(np.float32))
    a = torch.from_numpy(segs.astype(np.float32))
    emb_v = model.embed("visual", v, cfg.visual_grid)
    emb_a = model.embed("audio", a, cfg.audio_grid)
    e_v = model.encode_single(emb_v, "visual")
    e_a = model.encode_single(emb_a, "audio")
    joint = model.encode_joint(e_v, e_a, e_a)
    return EncoderOutput(
        per_frame_visual=joint.e_v_single[:, 1:].mean(dim=1).numpy(),
        per_frame_audio=joint.e_a_single[:, 1:].mean(dim=1).numpy(),
        global_visual=joint.e_v_single[:, 0].numpy(),
        global_audio=joint.e_a_single[:, 0].numpy(),
    )
