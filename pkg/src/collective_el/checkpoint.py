"""Versioned checkpoint container: named-tensor manifest + row-major payload.

Layout: 4-byte magic, little-endian uint32 header length, UTF-8 JSON header,
then the concatenated C-order float64 tensor bytes.  The byte stream is a pure
function of its contents (no timestamps), so identical states produce
identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .encoder import EncoderConfig, ModelParams

MAGIC = b"CELK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable or inconsistent checkpoint files."""


@dataclass
class Checkpoint:
    params: ModelParams
    vocab_hash: str
    mode: str | None = None
    epoch: int = 0
    step: int = 0
    extra_tensors: dict[str, np.ndarray] | None = None  # e.g. optimizer slots
    train_config: dict | None = None


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    tensors = dict(ckpt.params.tensors)
    for name, t in (ckpt.extra_tensors or {}).items():
        if name in tensors:
            raise CheckpointError(f"extra tensor name collides with manifest: {name}")
        tensors[name] = t

    manifest = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        manifest.append(
            {
                "name": name,
                "dtype": "<f8",
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload += arr.tobytes()

    header = {
        "format_version": FORMAT_VERSION,
        "encoder_config": asdict(ckpt.params.config),
        "vocab_hash": ckpt.vocab_hash,
        "mode": ckpt.mode,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "param_names": sorted(ckpt.params.tensors),
        "train_config": ckpt.train_config,
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')}"
        )
    payload = blob[8 + header_len :]

    tensors: dict[str, np.ndarray] = {}
    for spec in header["tensors"]:
        start, nbytes = spec["offset"], spec["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload at tensor {spec['name']}")
        arr = np.frombuffer(payload[start : start + nbytes], dtype=spec["dtype"])
        tensors[spec["name"]] = arr.reshape(spec["shape"]).astype(np.float64).copy()

    cfg = EncoderConfig(**header["encoder_config"])
    param_names = header["param_names"]
    missing = [n for n in param_names if n not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing tensors: {missing}")
    params = ModelParams(config=cfg, tensors={n: tensors[n] for n in param_names})
    extra = {n: t for n, t in tensors.items() if n not in set(param_names)}
    return Checkpoint(
        params=params,
        vocab_hash=header["vocab_hash"],
        mode=header["mode"],
        epoch=header["epoch"],
        step=header["step"],
        extra_tensors=extra or None,
        train_config=header.get("train_config"),
    )
