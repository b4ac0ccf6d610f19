"""Checkpoint bundles: one tensor file per named parameter plus a JSON
header with config, step count and loss history."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .tensorfile import load_tensor, save_tensor


class MissingArtifactError(FileNotFoundError):
    pass


def save_checkpoint(out_dir: str | Path, module: torch.nn.Module,
                    header: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for name, tensor in sorted(module.state_dict().items()):
        arr = tensor.detach().cpu().numpy().astype(np.float32)
        save_tensor(out_dir / "params" / f"{name}.avet", arr)
        names.append(name)
    header = dict(header)
    header["parameters"] = names
    (out_dir / "header.json").write_text(json.dumps(header, indent=1, sort_keys=True))


def load_header(ckpt_dir: str | Path) -> dict:
    path = Path(ckpt_dir) / "header.json"
    if not path.exists():
        raise MissingArtifactError(f"missing checkpoint header: {path}")
    return json.loads(path.read_text())


def load_checkpoint(ckpt_dir: str | Path, module: torch.nn.Module) -> dict:
    """Load parameters into ``module``; returns the header dict."""
    ckpt_dir = Path(ckpt_dir)
    header = load_header(ckpt_dir)
    state = {}
    for name in header["parameters"]:
        arr = load_tensor(ckpt_dir / "params" / f"{name}.avet")
        state[name] = torch.from_numpy(arr)
    expected = module.state_dict()
    for name, tensor in state.items():
        if name not in expected:
            raise MissingArtifactError(f"unexpected parameter {name} in {ckpt_dir}")
        state[name] = tensor.reshape(expected[name].shape).to(expected[name].dtype)
    module.load_state_dict(state)
    return header
