"""Checkpoint directories: config.json + index.json + one raw float32 file per tensor."""

from __future__ import annotations

import json
import os
import shutil
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn


def save_checkpoint(out_dir, model: nn.Module, config: dict) -> Path:
    """Write ``model.state_dict()`` (parameters and buffers) under ``out_dir``.

    The directory is assembled under a temporary name and renamed into place.
    """
    out_dir = Path(out_dir)
    tmp = out_dir.with_name(out_dir.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        index = {}
        for name, tensor in model.state_dict().items():
            fname = f"{name}.f32"
            arr = tensor.detach().cpu().numpy().astype("<f4")
            arr.tofile(tmp / fname)
            index[name] = {"file": fname, "shape": list(arr.shape), "dtype": "float32"}
        (tmp / "index.json").write_text(json.dumps(index, indent=1))
        (tmp / "config.json").write_text(json.dumps(config, indent=2))
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir


def read_config(ckpt_dir) -> dict:
    return json.loads((Path(ckpt_dir) / "config.json").read_text())


def read_tensors(ckpt_dir) -> dict:
    ckpt_dir = Path(ckpt_dir)
    index = json.loads((ckpt_dir / "index.json").read_text())
    out = {}
    for name, meta in index.items():
        arr = np.fromfile(ckpt_dir / meta["file"], dtype="<f4")
        shape = tuple(meta["shape"])
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"{name}: file holds {arr.size} values, index says {shape}")
        out[name] = torch.from_numpy(arr.reshape(shape).copy())
    return out


def load_state(model: nn.Module, ckpt_dir, prefix: str = "", strict: bool = True) -> None:
    """Load checkpoint tensors into ``model``; ``prefix`` selects a sub-tree (e.g. "glfe.")."""
    tensors = read_tensors(ckpt_dir)
    if prefix:
        tensors = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    ref = model.state_dict()
    state = {k: v.to(ref[k].dtype) if k in ref else v for k, v in tensors.items()}
    model.load_state_dict(state, strict=strict)
