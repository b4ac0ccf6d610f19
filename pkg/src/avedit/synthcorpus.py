"""Synthetic audio-visual event corpus and the editing benchmark built on it.

Each event class pairs a harmonic tone (fundamental chosen at a distinct
mel band center) with a checkerboard glyph at a class-specific patch cell,
so classes are separable both acoustically and visually at patch level.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .seeding import derive_seed
from .spectro import MelConfig, SignalError, hz_to_band, mel_spectrogram, mix_at_snr, peak_normalize
from .tensorfile import load_tensor, save_tensor


class ConfigurationError(ValueError):
    pass


_CLASS_NAMES = (
    "dog", "bell", "horn", "drum", "bird", "engine", "siren", "chime",
    "flute", "gong", "buzz", "whistle", "motor", "harp", "organ", "click",
)


@dataclass(frozen=True)
class CorpusConfig:
    duration_s: float = 2.0
    fps: int = 8
    frame_size: int = 64
    patch: int = 16
    segment_cols: int = 48
    ramp_s: float = 0.01
    mel: MelConfig = field(default_factory=MelConfig)

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_s * self.fps))

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.mel.sample_rate_hz))

    @property
    def mel_cols(self) -> int:
        return self.n_samples // self.mel.hop

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EventClass:
    id: int
    name: str
    base_freq_hz: float
    n_harmonics: int
    glyph_row: int
    glyph_col: int
    glyph_cell: int
    glyph_intensity: float


@dataclass(frozen=True)
class EventVocabulary:
    classes: tuple[EventClass, ...]
    seed: int

    def __getitem__(self, class_id: int) -> EventClass:
        return self.classes[class_id]

    def __len__(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "classes": [asdict(c) for c in self.classes]}

    @staticmethod
    def from_dict(d: dict) -> "EventVocabulary":
        return EventVocabulary(
            classes=tuple(EventClass(**c) for c in d["classes"]), seed=d["seed"]
        )


@dataclass(frozen=True)
class Event:
    class_id: int
    onset_s: float
    offset_s: float
    visible: bool = True
    audible: bool = True


@dataclass(frozen=True)
class EventScript:
    clip_id: str
    duration_s: float
    events: tuple[Event, ...]

    def __post_init__(self) -> None:
        for ev in self.events:
            if not (0.0 <= ev.onset_s < ev.offset_s <= self.duration_s):
                raise ConfigurationError(
                    f"event times ({ev.onset_s}, {ev.offset_s}) outside "
                    f"[0, {self.duration_s}]"
                )

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "duration_s": self.duration_s,
            "events": [asdict(e) for e in self.events],
        }

    @staticmethod
    def from_dict(d: dict) -> "EventScript":
        return EventScript(
            clip_id=d["clip_id"],
            duration_s=d["duration_s"],
            events=tuple(Event(**e) for e in d["events"]),
        )


@dataclass
class AVClip:
    script: EventScript
    frames: np.ndarray  # [T, H, W] in [0, 1]
    waveform: np.ndarray  # [S] in [-1, 1]
    mel: np.ndarray  # [M, L]


@dataclass
class EditTask:
    task_id: str
    operation: str  # add | remove | replace
    frames: np.ndarray
    input_audio: np.ndarray
    target_audio: np.ndarray
    text: str | None
    pristine_script: EventScript
    corrupted_script: EventScript
    edited_class_id: int


def canonical_hash(obj) -> str:
    """Stable content hash of a JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def make_event_vocabulary(num_classes: int, seed: int,
                          config: CorpusConfig | None = None) -> EventVocabulary:
    """Deterministic vocabulary of audio/visual event signatures.

    Fundamentals sit at distinct mel band centers; glyphs occupy distinct
    patch cells, so at most grid_cells classes fit.
    """
    if num_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
    config = config or CorpusConfig()
    grid = config.frame_size // config.patch
    if num_classes > grid * grid:
        raise ConfigurationError(
            f"at most {grid * grid} classes fit the {grid}x{grid} glyph grid"
        )
    mel = config.mel
    # Keep fundamentals away from the filterbank edges and leave headroom
    # for at least the 2nd harmonic.
    lo_band, hi_band = 6, mel.n_mels - 7
    bands = np.unique(np.round(np.linspace(lo_band, hi_band, num_classes)).astype(int))
    if bands.size < num_classes:
        raise ConfigurationError(
            f"cannot place {num_classes} distinct fundamentals in bands "
            f"[{lo_band}, {hi_band}]"
        )
    from .spectro import mel_band_centers

    centers = mel_band_centers(mel)
    rng = np.random.default_rng(derive_seed(seed, "vocabulary"))
    cells = [(r, c) for r in range(grid) for c in range(grid)]
    rng.shuffle(cells)
    classes = []
    for k in range(num_classes):
        freq = float(centers[bands[k]])
        max_h = max(1, int(mel.fmax_hz // freq))
        row, col = cells[k]
        classes.append(
            EventClass(
                id=k,
                name=_CLASS_NAMES[k % len(_CLASS_NAMES)]
                if k < len(_CLASS_NAMES)
                else f"class{k}",
                base_freq_hz=freq,
                n_harmonics=min(1 + k % 3, max_h),
                glyph_row=row,
                glyph_col=col,
                glyph_cell=int(2 ** (1 + k % 3)),
                glyph_intensity=float(0.6 + 0.4 * ((k * 7) % num_classes) / max(num_classes - 1, 1)),
            )
        )
    return EventVocabulary(classes=tuple(classes), seed=seed)


def event_tone(cls: EventClass, onset_s: float, offset_s: float,
               config: CorpusConfig) -> np.ndarray:
    """Harmonic tone with 1/h amplitude decay and cosine on/off ramps,
    windowed to [onset, offset) within a full-length buffer."""
    sr = config.mel.sample_rate_hz
    out = np.zeros(config.n_samples, dtype=np.float64)
    i0 = int(round(onset_s * sr))
    i1 = min(int(round(offset_s * sr)), config.n_samples)
    n = i1 - i0
    if n <= 0:
        return out
    t = np.arange(n) / sr
    tone = np.zeros(n, dtype=np.float64)
    for h in range(1, cls.n_harmonics + 1):
        f = cls.base_freq_hz * h
        if f >= sr / 2:
            break
        tone += np.sin(2.0 * math.pi * f * t) / h
    ramp_n = min(int(config.ramp_s * sr), n // 2)
    if ramp_n > 0:
        ramp = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp_n) / ramp_n))
        tone[:ramp_n] *= ramp
        tone[n - ramp_n :] *= ramp[::-1]
    out[i0:i1] = tone
    return out


def glyph_pattern(cls: EventClass, config: CorpusConfig) -> np.ndarray:
    """Checkerboard patch [patch, patch] for one class."""
    p = config.patch
    yy, xx = np.mgrid[0:p, 0:p]
    board = ((yy // cls.glyph_cell + xx // cls.glyph_cell) % 2).astype(np.float64)
    return cls.glyph_intensity * board


def render_frames(script: EventScript, vocab: EventVocabulary,
                  config: CorpusConfig) -> np.ndarray:
    frames = np.zeros(
        (config.n_frames, config.frame_size, config.frame_size), dtype=np.float64
    )
    p = config.patch
    for ev in script.events:
        if not ev.visible:
            continue
        cls = vocab[ev.class_id]
        pattern = glyph_pattern(cls, config)
        r0, c0 = cls.glyph_row * p, cls.glyph_col * p
        for i in range(config.n_frames):
            t = i / config.fps
            if ev.onset_s <= t < ev.offset_s:
                cell = frames[i, r0 : r0 + p, c0 : c0 + p]
                np.maximum(cell, pattern, out=cell)
    return frames


def render_waveform(script: EventScript, vocab: EventVocabulary,
                    config: CorpusConfig) -> np.ndarray:
    wav = np.zeros(config.n_samples, dtype=np.float64)
    for ev in script.events:
        if not ev.audible:
            continue
        wav += event_tone(vocab[ev.class_id], ev.onset_s, ev.offset_s, config)
    if np.max(np.abs(wav)) > 0:
        wav = peak_normalize(wav)
    return wav


def render_clip(script: EventScript, vocab: EventVocabulary,
                config: CorpusConfig) -> AVClip:
    for ev in script.events:
        if not (0 <= ev.class_id < len(vocab)):
            raise ConfigurationError(f"unknown class id {ev.class_id}")
    if abs(script.duration_s - config.duration_s) > 1e-9:
        raise ConfigurationError(
            f"script duration {script.duration_s} != config {config.duration_s}"
        )
    frames = render_frames(script, vocab, config)
    waveform = render_waveform(script, vocab, config)
    mel = mel_spectrogram(waveform, config.mel) if np.any(waveform) else np.full(
        (config.mel.n_mels, config.mel_cols), config.mel.log_floor
    )
    return AVClip(script=script, frames=frames, waveform=waveform, mel=mel)


def _sample_event(rng: np.random.Generator, num_classes: int, duration: float,
                  class_id: int | None = None) -> Event:
    length = float(rng.uniform(0.4, 1.2))
    onset = float(rng.uniform(0.0, duration - length))
    cid = int(rng.integers(num_classes)) if class_id is None else class_id
    return Event(class_id=cid, onset_s=round(onset, 4),
                 offset_s=round(onset + length, 4))


def sample_script(clip_id: str, vocab: EventVocabulary, config: CorpusConfig,
                  rng: np.random.Generator, max_events: int = 3) -> EventScript:
    """Random script with 1..max_events visible-and-audible events of
    pairwise distinct classes."""
    n_events = int(rng.integers(1, max_events + 1))
    classes = rng.choice(len(vocab), size=n_events, replace=False)
    events = tuple(
        _sample_event(rng, len(vocab), config.duration_s, class_id=int(c))
        for c in classes
    )
    return EventScript(clip_id=clip_id, duration_s=config.duration_s, events=events)


def _clip_paths(clip_id: str) -> dict:
    return {
        "frames": f"clips/{clip_id}.frames.avet",
        "waveform": f"clips/{clip_id}.wav.avet",
        "mel": f"clips/{clip_id}.mel.avet",
    }


def build_pretrain_corpus(n_clips: int, vocab: EventVocabulary,
                          config: CorpusConfig, seed: int,
                          out_dir: str | Path) -> dict:
    """Render and persist n_clips clips; returns the manifest dict
    (also written to out_dir/manifest.json)."""
    if n_clips < 1:
        raise ConfigurationError(f"n_clips must be >= 1, got {n_clips}")
    out_dir = Path(out_dir)
    records = []
    for idx in range(n_clips):
        clip_id = f"clip_{idx:05d}"
        clip_seed = derive_seed(seed, f"clip:{idx}")
        rng = np.random.default_rng(clip_seed)
        script = sample_script(clip_id, vocab, config, rng)
        clip = render_clip(script, vocab, config)
        paths = _clip_paths(clip_id)
        save_tensor(out_dir / paths["frames"], clip.frames)
        save_tensor(out_dir / paths["waveform"], clip.waveform)
        save_tensor(out_dir / paths["mel"], clip.mel)
        records.append(
            {"clip_id": clip_id, "seed": clip_seed, "paths": paths,
             "script": script.to_dict()}
        )
    manifest = {
        "kind": "pretrain_corpus",
        "seed": seed,
        "config": config.to_dict(),
        "config_hash": canonical_hash(config.to_dict()),
        "vocabulary": vocab.to_dict(),
        "clips": records,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True)
    )
    return manifest


def load_corpus_clip(out_dir: str | Path, record: dict) -> AVClip:
    out_dir = Path(out_dir)
    return AVClip(
        script=EventScript.from_dict(record["script"]),
        frames=load_tensor(out_dir / record["paths"]["frames"]),
        waveform=load_tensor(out_dir / record["paths"]["waveform"]),
        mel=load_tensor(out_dir / record["paths"]["mel"]),
    )


def _other_class(rng: np.random.Generator, num_classes: int,
                 used: set[int]) -> int:
    free = [c for c in range(num_classes) if c not in used]
    return int(rng.choice(free))


def make_edit_task(operation: str, task_id: str, vocab: EventVocabulary,
                   config: CorpusConfig, rng: np.random.Generator) -> EditTask:
    """One benchmark item. The target is always the pristine render of the
    visual script; the input is a corrupted variant per the operation."""
    pristine = sample_script(task_id, vocab, config, rng, max_events=2)
    used = {e.class_id for e in pristine.events}
    target_audio = render_waveform(pristine, vocab, config)
    pick = int(rng.integers(len(pristine.events)))

    if operation == "add":
        # Input lacks one audible event whose class stays visible.
        events = [
            ev if j != pick else Event(ev.class_id, ev.onset_s, ev.offset_s,
                                       visible=True, audible=False)
            for j, ev in enumerate(pristine.events)
        ]
        corrupted = EventScript(task_id, pristine.duration_s, tuple(events))
        input_audio = render_waveform(corrupted, vocab, config)
        edited = pristine.events[pick].class_id
    elif operation == "remove":
        # Input carries an off-screen distractor mixed in at a random SNR.
        cid = _other_class(rng, len(vocab), used)
        distractor = _sample_event(rng, len(vocab), config.duration_s, class_id=cid)
        distractor = Event(cid, distractor.onset_s, distractor.offset_s,
                           visible=False, audible=True)
        corrupted = EventScript(task_id, pristine.duration_s,
                                pristine.events + (distractor,))
        snr_db = float(rng.uniform(-5.0, 15.0))
        d_wav = event_tone(vocab[cid], distractor.onset_s, distractor.offset_s, config)
        input_audio = mix_at_snr(target_audio, d_wav, snr_db)
        edited = cid
    elif operation == "replace":
        # Input sounds the wrong class where the visuals show the right one.
        target_ev = pristine.events[pick]
        cid = _other_class(rng, len(vocab), used)
        events = [
            ev if j != pick else Event(ev.class_id, ev.onset_s, ev.offset_s,
                                       visible=True, audible=False)
            for j, ev in enumerate(pristine.events)
        ]
        wrong = Event(cid, target_ev.onset_s, target_ev.offset_s,
                      visible=False, audible=True)
        corrupted = EventScript(task_id, pristine.duration_s,
                                tuple(events) + (wrong,))
        input_audio = render_waveform(corrupted, vocab, config)
        edited = target_ev.class_id
    else:
        raise ConfigurationError(f"unknown operation {operation!r}")

    frames = render_frames(pristine, vocab, config)
    return EditTask(
        task_id=task_id,
        operation=operation,
        frames=frames,
        input_audio=input_audio,
        target_audio=target_audio,
        text=f"{operation} {vocab[edited].name}",
        pristine_script=pristine,
        corrupted_script=corrupted,
        edited_class_id=edited,
    )


def build_edit_benchmark(n_per_op: int, vocab: EventVocabulary,
                         config: CorpusConfig, seed: int,
                         out_dir: str | Path) -> dict:
    """Persist 3*n_per_op edit tasks (n_per_op per operation) plus a
    manifest; returns the manifest dict."""
    if n_per_op < 1:
        raise ConfigurationError(f"n_per_op must be >= 1, got {n_per_op}")
    out_dir = Path(out_dir)
    records = []
    for operation in ("add", "remove", "replace"):
        for idx in range(n_per_op):
            task_id = f"{operation}_{idx:04d}"
            rng = np.random.default_rng(derive_seed(seed, f"task:{task_id}"))
            task = make_edit_task(operation, task_id, vocab, config, rng)
            paths = {
                "frames": f"tasks/{task_id}.frames.avet",
                "input_audio": f"tasks/{task_id}.input.avet",
                "target_audio": f"tasks/{task_id}.target.avet",
            }
            save_tensor(out_dir / paths["frames"], task.frames)
            save_tensor(out_dir / paths["input_audio"], task.input_audio)
            save_tensor(out_dir / paths["target_audio"], task.target_audio)
            records.append(
                {
                    "task_id": task_id,
                    "operation": operation,
                    "paths": paths,
                    "text": task.text,
                    "edited_class_id": task.edited_class_id,
                    "pristine_script": task.pristine_script.to_dict(),
                    "corrupted_script": task.corrupted_script.to_dict(),
                }
            )
    manifest = {
        "kind": "edit_benchmark",
        "seed": seed,
        "n_per_op": n_per_op,
        "config": config.to_dict(),
        "config_hash": canonical_hash(config.to_dict()),
        "vocabulary": vocab.to_dict(),
        "tasks": records,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True)
    )
    return manifest


def load_benchmark_task(out_dir: str | Path, record: dict) -> EditTask:
    out_dir = Path(out_dir)
    return EditTask(
        task_id=record["task_id"],
        operation=record["operation"],
        frames=load_tensor(out_dir / record["paths"]["frames"]),
        input_audio=load_tensor(out_dir / record["paths"]["input_audio"]),
        target_audio=load_tensor(out_dir / record["paths"]["target_audio"]),
        text=record["text"],
        pristine_script=EventScript.from_dict(record["pristine_script"]),
        corrupted_script=EventScript.from_dict(record["corrupted_script"]),
        edited_class_id=record["edited_class_id"],
    )
