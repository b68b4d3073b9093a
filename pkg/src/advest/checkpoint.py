"""Versioned binary checkpoints.

Layout::

    b"ADVEST01"                 magic
    uint32 little-endian        header length
    header                      UTF-8 JSON: format_version, config_hash, env_steps, iteration
    payload                     pickled trainer state (params, optimizer, RNGs, envs, buffers, log)

Checkpoints are only meant to be read back by this package; the pickle
payload must not be loaded from untrusted sources.
"""

from __future__ import annotations

import json
import pickle
import struct
from pathlib import Path

MAGIC = b"ADVEST01"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, trainer, config_hash: str):
    state = trainer.state_dict()
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "env_steps": state["env_steps"],
        "iteration": state["iteration"],
    }).encode("utf-8")
    payload = pickle.dumps(state, protocol=pickle.HIGHEST_PROTOCOL)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)
    tmp.replace(path)


def read_checkpoint(path):
    """Return ``(header, state)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an advest checkpoint (bad magic bytes)")
    (size,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + size].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {header.get('format_version')}")
    state = pickle.loads(blob[12 + size:])
    return header, state


def load_checkpoint(path, trainer, config_hash: str):
    header, state = read_checkpoint(path)
    if header["config_hash"] != config_hash:
        raise CheckpointError(
            f"{path}: config hash {header['config_hash']} does not match current config {config_hash}; refusing to resume"
        )
    trainer.load_state_dict(state)
    return header
