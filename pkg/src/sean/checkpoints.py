"""Self-describing checkpoint bundles.

A checkpoint is a torch-saved dict {format_version, kind, config,
state_dict} restricted to plain containers and tensors so it loads under
``weights_only=True``.
"""

import os
import tempfile
from pathlib import Path

import torch

from .errors import ConfigError, DataError

FORMAT_VERSION = 1


def save_checkpoint(path, kind: str, config: dict, state_dict: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "state_dict": {k: v.detach().cpu() for k, v in state_dict.items()},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expected_kind: str) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigError(f"checkpoint {path} has format_version {version}, expected {FORMAT_VERSION}")
    kind = payload.get("kind")
    if kind != expected_kind:
        raise ConfigError(f"checkpoint {path} is of kind {kind!r}, expected {expected_kind!r}")
    return payload["config"], payload["state_dict"]
