"""Versioned checkpoint container: JSON header plus named tensors."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any

import torch

FORMAT = "layerseg-checkpoint"
FORMAT_VERSION = 1
KINDS = ("segmentation", "meta", "backbone")


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | os.PathLike, kind: str, config: dict, tensors: dict[str, torch.Tensor],
                    metadata: dict[str, Any] | None = None) -> Path:
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT, "version": FORMAT_VERSION, "kind": kind,
              "config": config, "metadata": metadata or {}}
    blob = {
        "header": json.dumps(header, sort_keys=True),
        "tensors": {k: v.detach().cpu().clone() for k, v in tensors.items()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike, kind: str | None = None) -> tuple[dict, dict[str, torch.Tensor]]:
    """Return (header, tensors); header holds kind, config and metadata."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        header = json.loads(blob["header"])
    except Exception as e:  # corrupt or foreign file
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if header.get("version", 0) > FORMAT_VERSION:
        raise CheckpointError(f"{path} has unsupported version {header['version']}")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {header.get('kind')!r} checkpoint, expected {kind!r}")
    return header, blob["tensors"]


def check_state_dict(expected: dict[str, torch.Tensor], given: dict[str, torch.Tensor],
                     ignore_prefixes: tuple[str, ...] = ()) -> None:
    """Raise CheckpointError naming the first missing, unexpected or misshapen tensor."""
    for name, ref in expected.items():
        if name not in given:
            if name.endswith("num_batches_tracked"):
                continue
            raise CheckpointError(f"missing tensor {name!r}")
        if tuple(given[name].shape) != tuple(ref.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: expected {tuple(ref.shape)}, got {tuple(given[name].shape)}"
            )
    for name in given:
        if name not in expected and not name.startswith(ignore_prefixes):
            raise CheckpointError(f"unexpected tensor {name!r}")


def state_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
