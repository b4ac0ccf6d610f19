"""Generative editor: a convolutional latent codec over log-mel
spectrograms, multimodal conditioning assembly with learned null
embeddings, joint-attention diffusion-transformer blocks followed by
latent-only blocks, conditional flow matching (with a DDPM
epsilon-prediction alternate objective), classifier-free guidance and
Euler sampling.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cavmae import MEL_SCALE, CavMae, extract_features
from .gating import GateConfig, frame_similarity
from .spectro import mel_spectrogram
from .synthcorpus import AVClip, CorpusConfig


class NumericError(RuntimeError):
    """Raised when sampling or training produces non-finite values."""


# ---------------------------------------------------------------------------
# Latent codec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CodecConfig:
    mel_bands: int = 32
    hidden: int = 128
    latent_channels: int = 8  # time downsampled 8x by three stride-2 stages

    def to_dict(self) -> dict:
        return asdict(self)


class LatentCodec(nn.Module):
    """Deterministic convolutional autoencoder over normalized log-mels
    [B, mel_bands, L] -> [B, latent_channels, L/8]."""

    def __init__(self, cfg: CodecConfig = CodecConfig()):
        super().__init__()
        self.cfg = cfg
        m, h, c = cfg.mel_bands, cfg.hidden, cfg.latent_channels
        # Stride-1 refinement convs between the resampling stages buy a
        # large reconstruction-fidelity margin over a plain strided stack.
        self.encoder = nn.Sequential(
            nn.Conv1d(m, h, 4, stride=2, padding=1), nn.GELU(),
            nn.Conv1d(h, h, 3, stride=1, padding=1), nn.GELU(),
            nn.Conv1d(h, h, 4, stride=2, padding=1), nn.GELU(),
            nn.Conv1d(h, h, 3, stride=1, padding=1), nn.GELU(),
            nn.Conv1d(h, c, 4, stride=2, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose1d(c, h, 4, stride=2, padding=1), nn.GELU(),
            nn.Conv1d(h, h, 3, stride=1, padding=1), nn.GELU(),
            nn.ConvTranspose1d(h, h, 4, stride=2, padding=1), nn.GELU(),
            nn.Conv1d(h, h, 3, stride=1, padding=1), nn.GELU(),
            nn.ConvTranspose1d(h, m, 4, stride=2, padding=1),
        )
        self.register_buffer("latent_mean", torch.zeros(c))
        self.register_buffer("latent_std", torch.ones(c))

    def encode(self, mel_norm: torch.Tensor) -> torch.Tensor:
        return self.encoder(mel_norm)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def normalize_latent(self, z: torch.Tensor) -> torch.Tensor:
        return (z - self.latent_mean[:, None]) / self.latent_std[:, None]

    def denormalize_latent(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.latent_std[:, None] + self.latent_mean[:, None]


class CodecTrainingError(RuntimeError):
    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = history


def train_codec(mels_norm: np.ndarray, seed: int, cfg: CodecConfig = CodecConfig(),
                epochs: int = 200, batch_size: int = 16, lr: float = 2e-3,
                val_fraction: float = 0.2, mse_target: float = 0.02
                ) -> tuple[LatentCodec, list[float]]:
    """Train the codec on normalized log-mels [N, M, L]; freezes latent
    normalization statistics on success. Raises CodecTrainingError if the
    validation MSE target is missed within the epoch budget."""
    torch.manual_seed(seed)
    codec = LatentCodec(cfg)
    data = torch.from_numpy(np.asarray(mels_norm, dtype=np.float32))
    n_val = max(1, int(round(val_fraction * len(data))))
    val, train = data[:n_val], data[n_val:]
    if len(train) == 0:
        train = val
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs)
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(epochs):
        codec.train()
        order = rng.permutation(len(train))
        for lo in range(0, len(train), batch_size):
            batch = train[order[lo : lo + batch_size]]
            loss = F.mse_loss(codec.decode(codec.encode(batch)), batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
        codec.eval()
        with torch.no_grad():
            val_mse = float(F.mse_loss(codec.decode(codec.encode(val)), val))
        history.append(val_mse)
        if val_mse < mse_target:
            break
    else:
        raise CodecTrainingError(
            f"codec validation MSE {history[-1]:.4f} above {mse_target} after "
            f"{epochs} epochs; curve: {['%.4f' % h for h in history[-10:]]}",
            history,
        )
    with torch.no_grad():
        z = codec.encode(data)
        codec.latent_mean.copy_(z.mean(dim=(0, 2)))
        codec.latent_std.copy_(z.std(dim=(0, 2)).clamp_min(1e-6))
    codec.eval()
    return codec, history


# ---------------------------------------------------------------------------
# Editor network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EditorConfig:
    d_model: int = 128
    heads: int = 4
    n_mmdit: int = 2
    n_single: int = 4
    mlp_ratio: float = 4.0
    feature_dim: int = 128  # co-encoder feature width
    latent_channels: int = 8
    latent_len: int = 32
    n_frames: int = 16
    frame_size: int = 64
    sync_dim: int = 32
    n_text_tokens: int = 2
    vocab_size: int = 16  # class names + the three operation words
    cfg_dropout: float = 0.1
    # Text is dropped less often than the dense modalities so the model
    # learns to lean on the instruction when one is present.
    cfg_dropout_text: float = 0.05
    cfg_scale: float = 2.0
    steps: int = 25
    objective: str = "cfm"  # "cfm" or "ddpm"
    ddpm_steps: int = 1000
    rope_base: float = 10000.0

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


OPERATIONS = ("add", "remove", "replace")


class TextVocab:
    """Token table over {operation words} union {class names}."""

    def __init__(self, class_names: list[str]):
        self.tokens = list(OPERATIONS) + list(class_names)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            if word not in self.index:
                raise ValueError(f"unknown word {word!r} for the text vocabulary")
            ids.append(self.index[word])
        return ids


class SyncEncoder(nn.Module):
    """Per-frame lightweight conv embedding of frames. Kept frozen at a
    seeded random init; only the downstream projection layer trains."""

    def __init__(self, frame_size: int, sync_dim: int, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        k2 = min(4, max(1, frame_size // 4))
        self.net = nn.Sequential(
            nn.Conv2d(1, 8, 4, stride=4), nn.GELU(),
            nn.Conv2d(8, sync_dim, k2, stride=k2), nn.GELU(),
            nn.AdaptiveAvgPool2d(1),
        )
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """[B, T, H, W] -> [B, T, sync_dim]"""
        b, t, h, w = frames.shape
        x = self.net(frames.reshape(b * t, 1, h, w))
        return x.reshape(b, t, -1)


class ConditioningBundle(NamedTuple):
    f_a: torch.Tensor  # [B, T, d] gated audio tokens
    f_v: torch.Tensor  # [B, T, d]
    f_sync: torch.Tensor  # [B, T, d]
    f_t: torch.Tensor  # [B, Lt, d]
    g_c: torch.Tensor  # [B, d]
    f_c: torch.Tensor  # [B, d]


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0
                       ) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype) / half
    )
    args = t[:, None] * freqs[None] * 1000.0
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def rope_rotate(x: torch.Tensor, pos: torch.Tensor, base: float) -> torch.Tensor:
    """Rotary embedding over the last dim; x: [B, H, N, hd], pos: [N]."""
    hd = x.shape[-1]
    half = hd // 2
    freqs = base ** (-torch.arange(half, dtype=x.dtype) / half)
    angles = pos[:, None] * freqs[None]  # [N, half]
    cos = torch.cos(angles)[None, None]
    sin = torch.sin(angles)[None, None]
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale[:, None]) + shift[:, None]


STREAMS = ("latent", "audio", "sync", "visual", "text")
# f_c modulates the temporally aligned streams; g_c the global ones.
STREAM_GLOBAL = {"latent": "f_c", "audio": "f_c", "sync": "f_c",
                 "visual": "g_c", "text": "g_c"}
STREAM_ROPE = {"latent": True, "audio": True, "sync": True, "visual": True,
               "text": False}


class StreamParams(nn.Module):
    """Per-stream parameters of one MM-DiT block."""

    def __init__(self, d: int, mlp_ratio: float, convolutional: bool):
        super().__init__()
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        # SiLU before the modulation projection lets the global vector's
        # components interact (e.g. an instruction's operation word gating
        # its class word) instead of contributing purely additive shifts.
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(d, 6 * d))
        nn.init.zeros_(self.adaln[1].weight)
        nn.init.zeros_(self.adaln[1].bias)
        hidden = int(d * mlp_ratio)
        if convolutional:
            self.mlp = nn.Sequential(
                TransposeLast(), nn.Conv1d(d, hidden, 3, padding=1), nn.GELU(),
                nn.Conv1d(hidden, d, 3, padding=1), TransposeLast(),
            )
        else:
            self.mlp = nn.Sequential(nn.Linear(d, hidden), nn.GELU(),
                                     nn.Linear(hidden, d))


class TransposeLast(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x.transpose(-1, -2)


class MMDiTBlock(nn.Module):
    """Joint attention over the concatenated modality streams; each stream
    has its own norms, projections, adaptive modulation and (for temporal
    streams) a ConvMLP."""

    def __init__(self, cfg: EditorConfig, streams: tuple[str, ...] = STREAMS):
        super().__init__()
        self.cfg = cfg
        self.streams = streams
        self.params = nn.ModuleDict(
            {s: StreamParams(cfg.d_model, cfg.mlp_ratio, convolutional=s != "text")
             for s in streams}
        )

    def forward(self, xs: dict[str, torch.Tensor],
                positions: dict[str, torch.Tensor],
                g_c: torch.Tensor, f_c: torch.Tensor) -> dict[str, torch.Tensor]:
        cfg = self.cfg
        b = next(iter(xs.values())).shape[0]
        mods, qs, ks, vs, lengths = {}, [], [], [], []
        for s in self.streams:
            p = self.params[s]
            cond = f_c if STREAM_GLOBAL[s] == "f_c" else g_c
            mod = p.adaln(cond).chunk(6, dim=-1)
            mods[s] = mod
            h = modulate(p.norm1(xs[s]), mod[0], mod[1])
            q, k, v = p.qkv(h).chunk(3, dim=-1)

            def heads(x):
                return x.reshape(b, -1, cfg.heads, cfg.head_dim).transpose(1, 2)

            q, k, v = heads(q), heads(k), heads(v)
            if STREAM_ROPE[s]:
                q = rope_rotate(q, positions[s], cfg.rope_base)
                k = rope_rotate(k, positions[s], cfg.rope_base)
            qs.append(q)
            ks.append(k)
            vs.append(v)
            lengths.append(xs[s].shape[1])
        q = torch.cat(qs, dim=2)
        k = torch.cat(ks, dim=2)
        v = torch.cat(vs, dim=2)
        attn = F.scaled_dot_product_attention(q, k, v)
        attn = attn.transpose(1, 2).reshape(b, sum(lengths), cfg.d_model)
        out = {}
        offset = 0
        for s, n in zip(self.streams, lengths):
            p = self.params[s]
            mod = mods[s]
            x = xs[s] + mod[2][:, None] * p.proj(attn[:, offset : offset + n])
            h = modulate(p.norm2(x), mod[3], mod[4])
            out[s] = x + mod[5][:, None] * p.mlp(h)
            offset += n
        return out


class SingleDiTBlock(MMDiTBlock):
    """Latent-only block: the joint attention degenerates to self-attention."""

    def __init__(self, cfg: EditorConfig):
        super().__init__(cfg, streams=("latent",))


class FinalLayer(nn.Module):
    def __init__(self, cfg: EditorConfig):
        super().__init__()
        self.norm = nn.LayerNorm(cfg.d_model, elementwise_affine=False)
        self.adaln = nn.Sequential(nn.SiLU(),
                                   nn.Linear(cfg.d_model, 2 * cfg.d_model))
        self.out = nn.Linear(cfg.d_model, cfg.latent_channels)
        nn.init.zeros_(self.adaln[1].weight)
        nn.init.zeros_(self.adaln[1].bias)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, f_c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.adaln(f_c).chunk(2, dim=-1)
        return self.out(modulate(self.norm(x), shift, scale))


class Editor(nn.Module):
    def __init__(self, cfg: EditorConfig, sync_seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.proj_audio = nn.Linear(cfg.feature_dim, d)
        self.proj_visual = nn.Linear(cfg.feature_dim, d)
        self.proj_sync = nn.Linear(cfg.sync_dim, d)
        self.text_emb = nn.Embedding(cfg.vocab_size, d)
        self.null_a = nn.Parameter(0.02 * torch.randn(d))
        self.null_v = nn.Parameter(0.02 * torch.randn(d))
        self.null_t = nn.Parameter(0.02 * torch.randn(d))
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.latent_in = nn.Linear(cfg.latent_channels, d)
        self.mmdit = nn.ModuleList(MMDiTBlock(cfg) for _ in range(cfg.n_mmdit))
        self.single = nn.ModuleList(SingleDiTBlock(cfg) for _ in range(cfg.n_single))
        self.final = FinalLayer(cfg)
        self.sync_encoder = SyncEncoder(cfg.frame_size, cfg.sync_dim, seed=sync_seed)
        # Temporal positions in frame units so streams of different length
        # align on the same clock.
        latent_pos = (torch.arange(cfg.latent_len) + 0.5) * cfg.n_frames / cfg.latent_len
        frame_pos = torch.arange(cfg.n_frames) + 0.5
        self.register_buffer("latent_pos", latent_pos)
        self.register_buffer("frame_pos", frame_pos)

    # -- conditioning -----------------------------------------------------

    def null_text(self, batch: int) -> torch.Tensor:
        return self.null_t.expand(batch, self.cfg.n_text_tokens, -1)

    def build_conditioning(self, audio_features: torch.Tensor | None,
                           kept_mask: torch.Tensor | None,
                           visual_features: torch.Tensor | None,
                           frames: torch.Tensor,
                           text_ids: torch.Tensor | None,
                           t: torch.Tensor) -> ConditioningBundle:
        """Project per-modality features to the editor width, substitute
        learnable nulls for gated-out audio rows and absent modalities,
        and assemble the global control vectors."""
        b = frames.shape[0]
        if audio_features is None:
            f_a = self.null_a.expand(b, self.cfg.n_frames, -1)
        else:
            f_a = self.proj_audio(audio_features)
            if kept_mask is not None:
                f_a = torch.where(kept_mask[:, :, None], f_a,
                                  self.null_a.expand_as(f_a))
        if visual_features is None:
            f_v = self.null_v.expand(b, self.cfg.n_frames, -1)
        else:
            f_v = self.proj_visual(visual_features)
        f_sync = self.proj_sync(self.sync_encoder(frames))
        if text_ids is None:
            f_t = self.null_text(b)
        else:
            f_t = self.text_emb(text_ids)
        return self._assemble(f_a, f_v, f_sync, f_t, t)

    def _assemble(self, f_a, f_v, f_sync, f_t, t) -> ConditioningBundle:
        t_emb = self.time_mlp(timestep_embedding(t, self.cfg.d_model))
        g_c = f_a.mean(dim=1) + f_v.mean(dim=1) + f_t.mean(dim=1) + t_emb
        f_c = g_c + f_sync.mean(dim=1)
        return ConditioningBundle(f_a=f_a, f_v=f_v, f_sync=f_sync, f_t=f_t,
                                  g_c=g_c, f_c=f_c)

    def nullify(self, bundle: ConditioningBundle, t: torch.Tensor,
                audio: bool = True, visual: bool = True, text: bool = True,
                item_mask: dict[str, torch.Tensor] | None = None
                ) -> ConditioningBundle:
        """Replace selected modalities by their null embeddings; sync stays
        (it is not a CFG-dropped modality)."""
        f_a, f_v, f_t = bundle.f_a, bundle.f_v, bundle.f_t

        def swap(x, null, flag, key):
            if item_mask is not None and key in item_mask:
                m = item_mask[key][:, None, None]
                return torch.where(m, null.expand_as(x), x)
            return null.expand_as(x) if flag else x

        f_a = swap(f_a, self.null_a, audio, "audio")
        f_v = swap(f_v, self.null_v, visual, "visual")
        f_t = swap(f_t, self.null_t, text, "text")
        return self._assemble(f_a, f_v, bundle.f_sync, f_t, t)

    # -- denoiser ---------------------------------------------------------

    def forward(self, x_t: torch.Tensor, bundle: ConditioningBundle) -> torch.Tensor:
        """x_t: [B, C, L] -> prediction (velocity or epsilon) [B, C, L]."""
        cfg = self.cfg
        if x_t.shape[-1] != cfg.latent_len:
            raise ValueError(
                f"latent length {x_t.shape[-1]} exceeds the position table "
                f"({cfg.latent_len})"
            )
        xs = {
            "latent": self.latent_in(x_t.transpose(1, 2)),
            "audio": bundle.f_a,
            "sync": bundle.f_sync,
            "visual": bundle.f_v,
            "text": bundle.f_t,
        }
        positions = {
            "latent": self.latent_pos,
            "audio": self.frame_pos,
            "sync": self.frame_pos,
            "visual": self.frame_pos,
            "text": torch.zeros(xs["text"].shape[1]),
        }
        for blk in self.mmdit:
            xs = blk(xs, positions, bundle.g_c, bundle.f_c)
        latent = xs["latent"]
        for blk in self.single:
            latent = blk({"latent": latent}, positions, bundle.g_c, bundle.f_c)["latent"]
        return self.final(latent, bundle.f_c).transpose(1, 2)


# ---------------------------------------------------------------------------
# Objectives, guidance, sampling
# ---------------------------------------------------------------------------


class CondInputs(NamedTuple):
    """Raw (pre-projection) conditioning for a batch."""

    audio_features: torch.Tensor | None
    kept_mask: torch.Tensor | None
    visual_features: torch.Tensor | None
    frames: torch.Tensor
    text_ids: torch.Tensor | None


def ddpm_alpha_bar(n_steps: int) -> torch.Tensor:
    betas = torch.linspace(1e-4, 0.02, n_steps, dtype=torch.float64)
    return torch.cumprod(1.0 - betas, dim=0)


def cfm_loss(editor: Editor, x0: torch.Tensor, cond: CondInputs,
             gen: torch.Generator, dropout: float | None = None,
             t_power: float = 1.0) -> torch.Tensor:
    """Flow-matching objective along the linear noise path, with
    per-modality null dropout; DDPM epsilon mode behind cfg.objective.
    ``t_power`` > 1 importance-samples the noise level toward the data end
    of the path (t = u^power), where the regression target is hardest."""
    cfg = editor.cfg
    b = x0.shape[0]
    p = cfg.cfg_dropout if dropout is None else dropout
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    if cfg.objective == "cfm":
        t = torch.rand(b, generator=gen, dtype=x0.dtype).pow(t_power)
        x_t = (1.0 - t[:, None, None]) * x0 + t[:, None, None] * eps
        target = eps - x0
    elif cfg.objective == "ddpm":
        t_idx = torch.randint(1, cfg.ddpm_steps + 1, (b,), generator=gen)
        abar = ddpm_alpha_bar(cfg.ddpm_steps).to(x0.dtype)[t_idx - 1]
        x_t = (
            torch.sqrt(abar)[:, None, None] * x0
            + torch.sqrt(1.0 - abar)[:, None, None] * eps
        )
        target = eps
        t = t_idx.to(x0.dtype) / cfg.ddpm_steps
    else:
        raise ValueError(f"unknown objective {cfg.objective!r}")
    bundle = editor.build_conditioning(
        cond.audio_features, cond.kept_mask, cond.visual_features,
        cond.frames, cond.text_ids, t,
    )
    p_text = cfg.cfg_dropout_text if dropout is None else dropout
    if p > 0 or p_text > 0:
        rates = {"audio": p, "visual": p, "text": p_text}
        drops = {
            key: torch.rand(b, generator=gen) < rate
            for key, rate in rates.items()
        }
        bundle = editor.nullify(bundle, t, item_mask=drops)
    pred = editor(x_t, bundle)
    return ((pred - target) ** 2).mean()


def cfg_predict(editor: Editor, x_t: torch.Tensor, t: torch.Tensor,
                cond: CondInputs, s: float) -> torch.Tensor:
    """s * conditional + (1 - s) * fully-null prediction."""
    bundle = editor.build_conditioning(
        cond.audio_features, cond.kept_mask, cond.visual_features,
        cond.frames, cond.text_ids, t,
    )
    pred_c = editor(x_t, bundle)
    null_bundle = editor.nullify(bundle, t)
    pred_u = editor(x_t, null_bundle)
    return s * pred_c + (1.0 - s) * pred_u


@torch.no_grad()
def sample(editor: Editor, cond: CondInputs, steps: int, s: float,
           gen: torch.Generator) -> torch.Tensor:
    """Euler integration of the guided velocity field from noise (t=1) to
    data (t=0); deterministic under the generator."""
    if editor.cfg.objective != "cfm":
        raise ValueError("sampling is implemented for the flow-matching objective")
    editor.eval()
    b = cond.frames.shape[0]
    x = torch.randn(
        (b, editor.cfg.latent_channels, editor.cfg.latent_len), generator=gen
    )
    dt = 1.0 / steps
    for k in range(steps):
        t = torch.full((b,), 1.0 - k * dt)
        v = cfg_predict(editor, x, t, cond, s)
        x = x - dt * v
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite latent at sampling step {k}")
    return x


@torch.no_grad()
def decode_to_logmel(codec: LatentCodec, z_norm: torch.Tensor) -> np.ndarray:
    """Normalized latent -> log-mel spectrogram [M, L] (numpy)."""
    codec.eval()
    mel_norm = codec.decode(codec.denormalize_latent(z_norm))
    return (mel_norm.squeeze(0).numpy() * MEL_SCALE).astype(np.float64)


# ---------------------------------------------------------------------------
# End-to-end pipeline
# ---------------------------------------------------------------------------


@dataclass
class ModelStack:
    cavmae: CavMae
    codec: LatentCodec
    editor: Editor
    gate: GateConfig
    vocab: TextVocab
    corpus_cfg: CorpusConfig


def encode_text(vocab: TextVocab, text: str | None, n_tokens: int
                ) -> torch.Tensor | None:
    if text is None:
        return None
    ids = vocab.encode(text)
    if len(ids) != n_tokens:
        raise ValueError(
            f"expected {n_tokens} words, got {len(ids)} from {text!r}"
        )
    return torch.tensor([ids], dtype=torch.long)


@torch.no_grad()
def conditioning_inputs(stack: ModelStack, frames: np.ndarray,
                        waveform: np.ndarray, text: str | None
                        ) -> tuple[CondInputs, dict]:
    """Co-encoder features for (frames, audio), gated per frame, plus the
    gating report consumed by the edit manifest."""
    cfg = stack.corpus_cfg
    mel = mel_spectrogram(np.asarray(waveform, dtype=np.float64), cfg.mel)
    clip = AVClip(script=None, frames=np.asarray(frames, dtype=np.float64),
                  waveform=np.asarray(waveform, dtype=np.float64), mel=mel)
    feats = extract_features(stack.cavmae, clip, cfg)
    sims = frame_similarity(feats.per_frame_audio, feats.per_frame_visual)
    kept = sims > stack.gate.r
    cond = CondInputs(
        audio_features=torch.from_numpy(
            feats.per_frame_audio.astype(np.float32)
        )[None],
        kept_mask=torch.from_numpy(kept)[None],
        visual_features=torch.from_numpy(
            feats.per_frame_visual.astype(np.float32)
        )[None],
        frames=torch.from_numpy(np.asarray(frames, dtype=np.float32))[None],
        text_ids=encode_text(stack.vocab, text, stack.editor.cfg.n_text_tokens),
    )
    report = {
        "sims": [float(v) for v in sims],
        "kept": [bool(v) for v in kept],
        "threshold": float(stack.gate.r),
    }
    return cond, report


@torch.no_grad()
def encode_latent(codec: LatentCodec, mel: np.ndarray) -> torch.Tensor:
    """Log-mel [M, L] -> normalized latent [C, L/8]."""
    codec.eval()
    mel_norm = torch.from_numpy(
        (np.asarray(mel, dtype=np.float64) / MEL_SCALE).astype(np.float32)
    )
    return codec.normalize_latent(codec.encode(mel_norm[None]))[0]


class EditorItem(NamedTuple):
    cond: CondInputs
    x0: torch.Tensor  # [C, L] normalized target latent


@torch.no_grad()
def prepare_training_item(stack: ModelStack, frames: np.ndarray,
                          input_audio: np.ndarray, target_audio: np.ndarray,
                          text: str | None) -> EditorItem:
    cond, _ = conditioning_inputs(stack, frames, input_audio, text)
    mel = mel_spectrogram(np.asarray(target_audio, dtype=np.float64),
                          stack.corpus_cfg.mel)
    return EditorItem(cond=cond, x0=encode_latent(stack.codec, mel))


def _stack_cond(items: list[EditorItem]) -> CondInputs:
    if any(it.cond.text_ids is None for it in items):
        raise ValueError("training items must carry text conditioning")
    return CondInputs(
        audio_features=torch.cat([it.cond.audio_features for it in items]),
        kept_mask=torch.cat([it.cond.kept_mask for it in items]),
        visual_features=torch.cat([it.cond.visual_features for it in items]),
        frames=torch.cat([it.cond.frames for it in items]),
        text_ids=torch.cat([it.cond.text_ids for it in items]),
    )


class EditorTrainer:
    """Seeded flow-matching training loop over precomputed items.

    Keeps an exponential moving average of the weights; sampling from the
    EMA copy is markedly more reliable than from the last SGD iterate.
    When ``total_steps`` is given the learning rate follows a cosine decay
    to zero over that horizon.
    """

    def __init__(self, editor: Editor, items: list[EditorItem], seed: int,
                 lr: float = 1e-4, batch_size: int = 8,
                 dropout: float | None = None, total_steps: int | None = None,
                 ema_decay: float = 0.999, t_power: float = 1.0):
        if not items:
            raise ValueError("empty editor training set")
        self.editor = editor
        self.items = items
        self.batch_size = batch_size
        self.dropout = dropout
        self.t_power = t_power
        trainable = [p for p in editor.parameters() if p.requires_grad]
        self.opt = torch.optim.Adam(trainable, lr=lr)
        self.sched = (
            torch.optim.lr_scheduler.CosineAnnealingLR(self.opt, total_steps)
            if total_steps else None
        )
        self.ema_decay = ema_decay
        self.ema = {k: v.detach().clone()
                    for k, v in editor.state_dict().items()}
        self.rng = np.random.default_rng(seed)
        self.gen = torch.Generator().manual_seed(seed)
        self.history: list[float] = []

    def step(self) -> float:
        self.editor.train()
        idx = self.rng.integers(len(self.items), size=self.batch_size)
        batch = [self.items[int(i)] for i in idx]
        cond = _stack_cond(batch)
        x0 = torch.stack([it.x0 for it in batch])
        loss = cfm_loss(self.editor, x0, cond, self.gen, self.dropout,
                        t_power=self.t_power)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at step {len(self.history)}")
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        if self.sched is not None:
            self.sched.step()
        with torch.no_grad():
            for k, v in self.editor.state_dict().items():
                if v.dtype.is_floating_point:
                    self.ema[k].mul_(self.ema_decay).add_(
                        v, alpha=1.0 - self.ema_decay)
                else:
                    self.ema[k].copy_(v)
        self.history.append(float(loss.detach()))
        return self.history[-1]

    def load_ema(self) -> None:
        """Overwrite the live weights with the EMA copy."""
        self.editor.load_state_dict(self.ema)

    def train(self, n_steps: int) -> list[float]:
        for _ in range(n_steps):
            self.step()
        return self.history


class EditResult(NamedTuple):
    spectrogram: np.ndarray  # [M, L] log-mel
    latent: np.ndarray  # [C, L/8] normalized
    report: dict


def edit(stack: ModelStack, frames: np.ndarray, input_audio: np.ndarray,
         text: str | None, seed: int, steps: int | None = None,
         s: float | None = None) -> EditResult:
    """Full editing pass: co-encoder features, gating, conditioning,
    guided sampling, codec decode."""
    cfg = stack.editor.cfg
    steps = cfg.steps if steps is None else steps
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    s = cfg.cfg_scale if s is None else s
    cond, report = conditioning_inputs(stack, frames, input_audio, text)
    gen = torch.Generator().manual_seed(seed)
    z = sample(stack.editor, cond, steps, s, gen)
    logmel = decode_to_logmel(stack.codec, z)
    report = dict(report, seed=int(seed), steps=int(steps), cfg_scale=float(s))
    return EditResult(spectrogram=logmel, latent=z[0].numpy(), report=report)
