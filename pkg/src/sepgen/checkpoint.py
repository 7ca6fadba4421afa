"""Self-describing checkpoint archives.

Every checkpoint is a torch archive holding a format version, a kind tag, the
relevant config as plain data, and parameter state dicts. Writes are atomic
(temp file then rename).
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import torch

from .errors import DataError

FORMAT_VERSION = 1


def save_archive(path: str | Path, kind: str, config: dict, state: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "state": state,
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def load_archive(path: str | Path, expected_kind: str | None = None) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if "format_version" not in payload:
        raise DataError(f"{path} is missing the format_version field")
    if payload["format_version"] != FORMAT_VERSION:
        raise DataError(
            f"{path} has format_version {payload['format_version']}, expected {FORMAT_VERSION}"
        )
    if expected_kind is not None and payload.get("kind") != expected_kind:
        raise DataError(
            f"{path} holds a {payload.get('kind')!r} checkpoint, expected {expected_kind!r}"
        )
    return payload
