"""Binary checkpoint container for the networks.

Layout (all integers little-endian):

    b"PXCK" | u32 version | u64 header length | JSON header (utf-8)
    | n float64 parameters (little-endian) | 32-byte sha256 of everything before

The header records the architecture descriptor, schedule constants, the
parameter count and free-form metadata.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import (CheckpointError, ChecksumError, DescriptorMismatchError,
                     TruncatedCheckpointError, VersionMismatchError)
from .nets import ArchSpec, build_net, get_flat_params, set_flat_params
from .schedule import NoiseSchedule

MAGIC = b"PXCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DIGEST = 32


def encode_checkpoint(net, metadata=None) -> bytes:
    sched = getattr(net, "schedule", None) or NoiseSchedule()
    params = get_flat_params(net).astype("<f8")
    header = {
        "arch": net.arch.as_dict(),
        "schedule": {"beta_min": sched.beta_min, "beta_max": sched.beta_max},
        "n_params": int(params.size),
        "metadata": metadata or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(head)) + head + params.tobytes()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(net, metadata, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(net, metadata))
    return path


def decode_checkpoint(blob: bytes, source="<bytes>"):
    """Return (header dict, parameter array) after all integrity checks."""
    if len(blob) < _PREFIX.size + _DIGEST:
        raise TruncatedCheckpointError(f"{source}: file too short to be a checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file (bad magic {magic!r})")
    if version != VERSION:
        raise VersionMismatchError(f"{source}: format version {version}, expected {VERSION}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        end = _PREFIX.size + head_len
        if end > len(body) or (len(body) - end) % 8:
            raise TruncatedCheckpointError(f"{source}: truncated checkpoint (checksum mismatch)")
        raise ChecksumError(f"{source}: checksum mismatch")
    try:
        header = json.loads(body[_PREFIX.size:_PREFIX.size + head_len].decode())
    except ValueError as exc:
        raise CheckpointError(f"{source}: unreadable header") from exc
    params = np.frombuffer(body, dtype="<f8", offset=_PREFIX.size + head_len)
    if params.size != header["n_params"]:
        raise TruncatedCheckpointError(
            f"{source}: {params.size} parameters stored, header says {header['n_params']}")
    return header, params.astype(np.float64)


def load_checkpoint(path, expect_arch: ArchSpec | None = None):
    """Rebuild the network stored at ``path``; returns (net, metadata).

    With ``expect_arch``, a checkpoint for any other architecture is refused.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    header, params = decode_checkpoint(path.read_bytes(), source=str(path))
    arch = ArchSpec(**header["arch"])
    if expect_arch is not None and arch != expect_arch:
        raise DescriptorMismatchError(
            f"{path}: checkpoint architecture {arch} does not match expected {expect_arch}")
    net = build_net(arch, NoiseSchedule(**header["schedule"]))
    set_flat_params(net, params)
    return net, header["metadata"]
