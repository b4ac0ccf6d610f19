"""Pipeline stages behind the CLI: each stage reads its inputs from the
run directory, writes artifacts tagged with the config hash, and is
byte-reproducible given the same config and seed."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np
import torch

from .cavmae import (
    MEL_SCALE,
    CavMae,
    CavMaeConfig,
    CavMaeTrainer,
    extract_features,
    prepare_clip,
)
from .checkpoints import MissingArtifactError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, check_hash
from .editor import (
    Editor,
    EditorConfig,
    EditorTrainer,
    GateConfig,
    LatentCodec,
    ModelStack,
    TextVocab,
    edit,
    prepare_training_item,
    train_codec,
)
from .evalsuite import ProbeClassifier, evaluate_benchmark, train_probe
from .gating import calibrate_threshold, frame_similarity
from .plotting import (
    plot_gate_histogram,
    plot_loss_curves,
    plot_metric_bars,
    plot_scalar_curve,
    plot_spectrogram,
)
from .seeding import derive_seed
from .spectro import mel_spectrogram
from .synthcorpus import (
    AVClip,
    CorpusConfig,
    EventVocabulary,
    build_edit_benchmark,
    build_pretrain_corpus,
    load_benchmark_task,
    load_corpus_clip,
    make_edit_task,
    make_event_vocabulary,
)
from .tensorfile import load_tensor, save_tensor

LOSS_KEYS = ("contrastive", "mae_visual", "mae_audio", "total")


def set_threads() -> None:
    torch.set_num_threads(max(1, int(os.environ.get("AVEDIT_THREADS", "1"))))


# -- path layout ------------------------------------------------------------


def corpus_dir(cfg: RunConfig) -> Path:
    return cfg.out_dir / "corpus"


def benchmark_dir(cfg: RunConfig) -> Path:
    return cfg.out_dir / "benchmark"


def ckpt_dir(cfg: RunConfig, name: str) -> Path:
    return cfg.out_dir / "ckpts" / name


def reports_dir(cfg: RunConfig) -> Path:
    return cfg.out_dir / "reports"


def gate_path(cfg: RunConfig) -> Path:
    return cfg.out_dir / "gate.json"


def edits_dir(cfg: RunConfig, variant: str) -> Path:
    return cfg.out_dir / "edits" / variant


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=2))


def _read_manifest(path: Path, what: str) -> dict:
    if not path.exists():
        raise MissingArtifactError(f"missing {what}: {path} (run gen-data)")
    return json.loads(path.read_text())


# -- shared loaders ---------------------------------------------------------


def load_corpus(cfg: RunConfig) -> tuple[dict, EventVocabulary, CorpusConfig]:
    manifest = _read_manifest(corpus_dir(cfg) / "manifest.json", "pretrain corpus")
    vocab = EventVocabulary.from_dict(manifest["vocabulary"])
    return manifest, vocab, CorpusConfig()


def _load_cavmae(cfg: RunConfig, force: bool) -> CavMae:
    model = CavMae(CavMaeConfig())
    header = load_checkpoint(ckpt_dir(cfg, "cavmae"), model)
    check_hash(header["config_hash"], cfg, "co-encoder checkpoint", force)
    model.eval()
    return model


def _load_codec(cfg: RunConfig, force: bool) -> LatentCodec:
    codec = LatentCodec()
    header = load_checkpoint(ckpt_dir(cfg, "codec"), codec)
    check_hash(header["config_hash"], cfg, "codec checkpoint", force)
    codec.eval()
    return codec


def _load_gate(cfg: RunConfig, force: bool) -> GateConfig:
    path = gate_path(cfg)
    if not path.exists():
        raise MissingArtifactError(f"missing gate config: {path} (run calibrate-gate)")
    data = json.loads(path.read_text())
    check_hash(data["config_hash"], cfg, "gate calibration", force)
    return GateConfig(r=data["r"])


def text_vocab(vocab: EventVocabulary) -> TextVocab:
    return TextVocab([c.name for c in vocab.classes])


def _editor_config(cfg: RunConfig, vocab: EventVocabulary) -> EditorConfig:
    ed = cfg["editor"]
    return EditorConfig(
        vocab_size=len(text_vocab(vocab)),
        cfg_scale=float(ed["cfg_scale"]),
        steps=int(ed["sample_steps"]),
        objective=ed["objective"],
    )


def _load_editor(cfg: RunConfig, vocab: EventVocabulary, force: bool) -> Editor:
    editor = Editor(_editor_config(cfg, vocab),
                    sync_seed=derive_seed(cfg.root_seed, "editor") % (2**31))
    header = load_checkpoint(ckpt_dir(cfg, "editor"), editor)
    check_hash(header["config_hash"], cfg, "editor checkpoint", force)
    editor.eval()
    return editor


def load_stack(cfg: RunConfig, force: bool = False) -> ModelStack:
    _, vocab, corpus_cfg = load_corpus(cfg)
    return ModelStack(
        cavmae=_load_cavmae(cfg, force),
        codec=_load_codec(cfg, force),
        editor=_load_editor(cfg, vocab, force),
        gate=_load_gate(cfg, force),
        vocab=text_vocab(vocab),
        corpus_cfg=corpus_cfg,
    )


# -- stages -----------------------------------------------------------------


def gen_data(cfg: RunConfig) -> dict:
    set_threads()
    corpus_cfg = CorpusConfig()
    vocab = make_event_vocabulary(
        cfg["corpus"]["n_classes"], derive_seed(cfg.root_seed, "corpus")
    )
    corpus = build_pretrain_corpus(
        cfg["corpus"]["n_pretrain_clips"], vocab, corpus_cfg,
        derive_seed(cfg.root_seed, "corpus"), corpus_dir(cfg),
    )
    bench = build_edit_benchmark(
        cfg["corpus"]["n_benchmark_per_op"], vocab, corpus_cfg,
        derive_seed(cfg.root_seed, "benchmark"), benchmark_dir(cfg),
    )
    return {"corpus_clips": len(corpus["clips"]), "benchmark_tasks": len(bench["tasks"])}


def pretrain_encoder(cfg: RunConfig, force: bool = False) -> list[dict]:
    set_threads()
    manifest, _, corpus_cfg = load_corpus(cfg)
    clips = [
        prepare_clip(load_corpus_clip(corpus_dir(cfg), rec), corpus_cfg)
        for rec in manifest["clips"]
    ]
    cm = cfg["cavmae"]
    torch.manual_seed(derive_seed(cfg.root_seed, "mask") % (2**31))
    model = CavMae(CavMaeConfig())
    trainer = CavMaeTrainer(
        model, clips, corpus_cfg, seed=derive_seed(cfg.root_seed, "mask"),
        lr=float(cm["lr"]), mix_prob=float(cm["mix_prob"]),
        mask_ratio=float(cm["mask_ratio"]), batch_clips=int(cm["batch_clips"]),
        frames_per_clip=int(cm["frames_per_clip"]),
        decay_start=int(cm["decay_start"]), decay_every=int(cm["decay_every"]),
        segmenting=bool(cm["segmenting"]),
    )
    history = trainer.train(int(cm["steps"]))
    save_checkpoint(
        ckpt_dir(cfg, "cavmae"), model,
        {"kind": "cavmae", "config_hash": cfg.config_hash,
         "steps": len(history), "final_losses": history[-1]},
    )
    rep = reports_dir(cfg)
    rep.mkdir(parents=True, exist_ok=True)
    with open(rep / "pretrain_losses.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("step", *LOSS_KEYS))
        writer.writeheader()
        writer.writerows(history)
    plot_loss_curves(history, list(LOSS_KEYS), rep / "pretrain_losses.png",
                     title="co-encoder pretraining")
    return history


def compute_corpus_sims(cfg: RunConfig, model: CavMae) -> list[np.ndarray]:
    manifest, _, corpus_cfg = load_corpus(cfg)
    sims = []
    for rec in manifest["clips"]:
        clip = load_corpus_clip(corpus_dir(cfg), rec)
        feats = extract_features(model, clip, corpus_cfg)
        sims.append(frame_similarity(feats.per_frame_audio, feats.per_frame_visual))
    return sims


def calibrate_gate(cfg: RunConfig, force: bool = False) -> float:
    set_threads()
    configured = cfg["gating"]["r"]
    if configured == "auto":
        model = _load_cavmae(cfg, force)
        sims = compute_corpus_sims(cfg, model)
        r = calibrate_threshold(sims)
        plot_gate_histogram(np.concatenate(sims), r,
                            reports_dir(cfg) / "gate_sims.png")
    else:
        r = float(configured)
    _write_json(gate_path(cfg), {"r": r, "config_hash": cfg.config_hash})
    return r


def train_codec_stage(cfg: RunConfig, force: bool = False) -> list[float]:
    set_threads()
    manifest, _, corpus_cfg = load_corpus(cfg)
    mels = np.stack([
        (load_tensor(corpus_dir(cfg) / rec["paths"]["mel"]) / MEL_SCALE)
        .astype(np.float32)
        for rec in manifest["clips"]
    ])
    cc = cfg["codec"]
    codec, history = train_codec(
        mels, seed=derive_seed(cfg.root_seed, "codec") % (2**31),
        epochs=int(cc["epochs"]), lr=float(cc["lr"]),
        batch_size=int(cc["batch_size"]), mse_target=float(cc["mse_target"]),
    )
    save_checkpoint(
        ckpt_dir(cfg, "codec"), codec,
        {"kind": "codec", "config_hash": cfg.config_hash,
         "val_mse": history[-1], "epochs": len(history)},
    )
    plot_scalar_curve(history, reports_dir(cfg) / "codec_val_mse.png",
                      "validation MSE", "codec training")
    return history


def build_editor_items(cfg: RunConfig, stack_parts: dict) -> list:
    """Edit-style training pairs from a substream disjoint from the
    benchmark: corrupted conditioning, pristine target."""
    vocab = stack_parts["vocab"]
    corpus_cfg = stack_parts["corpus_cfg"]
    stack = ModelStack(
        cavmae=stack_parts["cavmae"], codec=stack_parts["codec"],
        editor=stack_parts["editor"], gate=stack_parts["gate"],
        vocab=text_vocab(vocab), corpus_cfg=corpus_cfg,
    )
    items = []
    n = int(cfg["editor"]["n_train_items"])
    ops = ("add", "remove", "replace")
    for i in range(n):
        rng = np.random.default_rng(
            derive_seed(cfg.root_seed, f"editor-item:{i}")
        )
        task = make_edit_task(ops[i % 3], f"train_{i:04d}", vocab, corpus_cfg, rng)
        items.append(prepare_training_item(
            stack, task.frames, task.input_audio, task.target_audio, task.text
        ))
    return items


def train_editor_stage(cfg: RunConfig, force: bool = False) -> list[float]:
    set_threads()
    _, vocab, corpus_cfg = load_corpus(cfg)
    cavmae = _load_cavmae(cfg, force)
    codec = _load_codec(cfg, force)
    gate = _load_gate(cfg, force)
    torch.manual_seed(derive_seed(cfg.root_seed, "editor") % (2**31))
    editor = Editor(_editor_config(cfg, vocab),
                    sync_seed=derive_seed(cfg.root_seed, "editor") % (2**31))
    items = build_editor_items(cfg, {
        "vocab": vocab, "corpus_cfg": corpus_cfg, "cavmae": cavmae,
        "codec": codec, "editor": editor, "gate": gate,
    })
    ed = cfg["editor"]
    trainer = EditorTrainer(
        editor, items, seed=derive_seed(cfg.root_seed, "diffusion-t") % (2**31),
        lr=float(ed["lr"]), batch_size=int(ed["batch_size"]),
        total_steps=int(ed["train_steps"]),
    )
    history = trainer.train(int(ed["train_steps"]))
    trainer.load_ema()
    save_checkpoint(
        ckpt_dir(cfg, "editor"), editor,
        {"kind": "editor", "config_hash": cfg.config_hash,
         "steps": len(history), "final_loss": history[-1]},
    )
    plot_scalar_curve(history, reports_dir(cfg) / "editor_loss.png",
                      "flow-matching loss", "editor training")
    return history


def load_benchmark(cfg: RunConfig) -> list:
    manifest = _read_manifest(benchmark_dir(cfg) / "manifest.json",
                              "edit benchmark")
    return [load_benchmark_task(benchmark_dir(cfg), rec)
            for rec in manifest["tasks"]]


def edit_stage(cfg: RunConfig, steps: int | None = None,
               cfg_scale: float | None = None, seed: int | None = None,
               no_text: bool = False, force: bool = False) -> dict:
    set_threads()
    stack = load_stack(cfg, force)
    tasks = load_benchmark(cfg)
    variant = "no_text" if no_text else "with_text"
    out = edits_dir(cfg, variant)
    base_seed = cfg.root_seed if seed is None else seed
    records = []
    for task in tasks:
        result = edit(
            stack, task.frames, task.input_audio,
            None if no_text else task.text,
            seed=derive_seed(base_seed, f"sampler:{task.task_id}") % (2**31),
            steps=steps, s=cfg_scale,
        )
        rel = f"{task.task_id}.mel.avet"
        save_tensor(out / rel, result.spectrogram)
        records.append({"task_id": task.task_id, "operation": task.operation,
                        "path": rel, **result.report})
    manifest = {
        "kind": "edits", "variant": variant, "config_hash": cfg.config_hash,
        "base_seed": base_seed, "tasks": records,
    }
    _write_json(out / "manifest.json", manifest)
    first = tasks[0]
    plot_spectrogram(load_tensor(out / f"{first.task_id}.mel.avet"),
                     reports_dir(cfg) / f"edit_example_{variant}.png",
                     title=f"edited ({variant}): {first.task_id}")
    return manifest


def _get_probe(cfg: RunConfig, corpus_cfg, force: bool) -> ProbeClassifier:
    path = ckpt_dir(cfg, "probe")
    n_classes = int(cfg["corpus"]["n_classes"])
    if (path / "header.json").exists():
        probe = ProbeClassifier(n_classes)
        header = load_checkpoint(path, probe)
        check_hash(header["config_hash"], cfg, "probe checkpoint", force)
        probe.eval()
        return probe
    manifest, _, _ = load_corpus(cfg)
    clips = [load_corpus_clip(corpus_dir(cfg), rec) for rec in manifest["clips"]]
    ev = cfg["eval"]
    probe, history = train_probe(
        [(c.mel, c.script) for c in clips], n_classes,
        seed=derive_seed(cfg.root_seed, "probe") % (2**31),
        corpus_cfg=corpus_cfg, epochs=int(ev["probe_epochs"]),
        lr=float(ev["probe_lr"]),
    )
    save_checkpoint(
        path, probe,
        {"kind": "probe", "config_hash": cfg.config_hash,
         "val_accuracy": history[-1], "epochs": len(history)},
    )
    return probe


def evaluate_stage(cfg: RunConfig, variant: str = "with_text",
                   force: bool = False):
    set_threads()
    _, _, corpus_cfg = load_corpus(cfg)
    tasks = load_benchmark(cfg)
    out = edits_dir(cfg, variant)
    manifest = _read_manifest(out / "manifest.json", f"edits ({variant})")
    check_hash(manifest["config_hash"], cfg, f"edits ({variant})", force)
    edited = {rec["task_id"]: load_tensor(out / rec["path"])
              for rec in manifest["tasks"]}
    target_mels = {t.task_id: mel_spectrogram(t.target_audio, corpus_cfg.mel)
                   for t in tasks}
    input_mels = {t.task_id: mel_spectrogram(t.input_audio, corpus_cfg.mel)
                  for t in tasks}
    probe = _get_probe(cfg, corpus_cfg, force)
    cavmae = _load_cavmae(cfg, force)
    report = evaluate_benchmark(edited, tasks, target_mels, input_mels,
                                probe, cavmae, corpus_cfg)
    rep = reports_dir(cfg)
    rep.mkdir(parents=True, exist_ok=True)
    (rep / f"metrics_{variant}.json").write_text(report.to_json())
    (rep / f"metrics_{variant}.md").write_text(report.markdown_table() + "\n")
    plot_metric_bars(report, rep / f"metrics_{variant}.png")
    return report


def reproduce_all(cfg: RunConfig) -> dict:
    """Full pipeline in dependency order."""
    summary = {"gen_data": gen_data(cfg)}
    summary["pretrain_steps"] = len(pretrain_encoder(cfg))
    summary["gate_r"] = calibrate_gate(cfg)
    summary["codec_val_mse"] = train_codec_stage(cfg)[-1]
    summary["editor_final_loss"] = train_editor_stage(cfg)[-1]
    for no_text in (False, True):
        edit_stage(cfg, no_text=no_text)
        variant = "no_text" if no_text else "with_text"
        report = evaluate_stage(cfg, variant=variant)
        summary[f"metrics_{variant}"] = report.rows["edited"]["overall"]
    _write_json(reports_dir(cfg) / "summary.json",
                {"config_hash": cfg.config_hash, **summary})
    return summary
