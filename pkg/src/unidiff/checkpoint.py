"""Checkpoint directories.

Layout::

    config.txt      key=value model config (plus ``mode``)
    vocab.txt       one token per line, line number = id
    weights.bin     little-endian float32 tensors, back to back
    manifest.txt    ``name<TAB>shape<TAB>offset`` per tensor (shape like ``12x384``)

Training checkpoints add ``optimizer.bin``/``optimizer_manifest.txt`` with the
Adam moments and ``state.json`` with step, stage history and RNG state.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from unidiff.config import dump_kv, load_kv
from unidiff.model import MMDiT, ModelConfig
from unidiff.text import DEFAULT_VOCAB, Vocabulary


class CheckpointError(ValueError):
    pass


def write_blobs(tensors: dict[str, torch.Tensor], blob: Path, manifest: Path) -> None:
    lines = []
    offset = 0
    with open(blob, "wb") as fh:
        for name, tensor in tensors.items():
            data = tensor.detach().cpu().numpy().astype("<f4")
            fh.write(data.tobytes())
            shape = "x".join(str(s) for s in data.shape) or "scalar"
            lines.append(f"{name}\t{shape}\t{offset}")
            offset += data.nbytes
    manifest.write_text("\n".join(lines) + "\n")


def read_blobs(blob: Path, manifest: Path) -> dict[str, np.ndarray]:
    raw = blob.read_bytes()
    out = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, shape_s, offset_s = line.split("\t")
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
        count = int(np.prod(shape)) if shape else 1
        offset = int(offset_s)
        if offset + 4 * count > len(raw):
            raise CheckpointError(f"{blob}: tensor {name} runs past end of file")
        out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
    return out


def save_model(directory: str | Path, model: MMDiT, vocab: Vocabulary = DEFAULT_VOCAB) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = model.config.to_dict()
    cfg["mode"] = model.mode
    dump_kv(cfg, directory / "config.txt")
    vocab.dump(directory / "vocab.txt")
    write_blobs(dict(model.state_dict()), directory / "weights.bin", directory / "manifest.txt")
    return directory


def load_model(directory: str | Path) -> MMDiT:
    directory = Path(directory)
    if not (directory / "config.txt").exists():
        raise CheckpointError(f"{directory} has no config.txt")
    raw = load_kv(directory / "config.txt")
    mode = raw.pop("mode", "channel")
    config = ModelConfig.from_dict(raw)
    vocab = Vocabulary.load(directory / "vocab.txt")
    if len(vocab) != config.vocab_size:
        raise CheckpointError(f"vocabulary has {len(vocab)} tokens, config says {config.vocab_size}")
    model = MMDiT(config, mode)
    tensors = read_blobs(directory / "weights.bin", directory / "manifest.txt")
    expected = model.state_dict()
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"tensor names differ from config: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, array in tensors.items():
        if tuple(array.shape) != tuple(expected[name].shape):
            raise CheckpointError(f"{name}: shape {array.shape} != {tuple(expected[name].shape)} from config")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return model


def save_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def load_json(path: Path) -> dict:
    return json.loads(Path(path).read_text())
