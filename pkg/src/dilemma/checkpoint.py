"""Binary checkpoints: resolved config, step counter and every named array.

Layout (little-endian)::

    magic "DLCK" | u32 version | u32 config_len | config text (utf-8)
    u64 config digest (FNV-1a 64 of the text) | u64 step | u32 n_entries
    per entry: u32 name_len | name | u8 dtype tag | u32 rank | u32 extents[rank] | payload
    u64 content checksum (blake2b-8 of every preceding byte)

Entries cover student parameters (``student/``), teacher parameters
(``teacher/``) and AdamW moments (``optim.m/``, ``optim.v/``).
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .config import TrainConfig
from .model import STUDENT_ONLY_PREFIXES, init_params
from .rng import ConfigError, fnv1a64
from .tensor import Tensor
from .train import AdamWState, TrainState

MAGIC = b"DLCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {v: k for k, v in _DTYPES.items()}


class CheckpointFormatError(ValueError):
    """Malformed or truncated checkpoint; reports the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class CheckpointIntegrityError(ValueError):
    """Checksum or config digest mismatch (corrupted or tampered file)."""


class IncompatibleCheckpointError(ValueError):
    """Checkpoint structure does not fit the requested config."""


def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _entries(state: TrainState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, p in state.student.items():
        out[f"student/{name}"] = p.data
    for name, p in (state.teacher or {}).items():
        out[f"teacher/{name}"] = p.data
    for name, arr in state.optim.m.items():
        out[f"optim.m/{name}"] = arr
    for name, arr in state.optim.v.items():
        out[f"optim.v/{name}"] = arr
    out["optim.step"] = np.array([state.optim.step], dtype=np.int64)
    return out


def encode_checkpoint(state: TrainState, cfg: TrainConfig, step: int) -> bytes:
    text = cfg.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<QQ", fnv1a64(text), step)]
    entries = _entries(state)
    parts.append(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        dt = np.dtype(arr.dtype).newbyteorder("<")
        if dt not in _TAGS:
            raise TypeError(f"unsupported dtype {arr.dtype} for '{name}'")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", _TAGS[dt], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", _checksum(body))


def save_checkpoint(path, state: TrainState, cfg: TrainConfig, step: int) -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(state, cfg, step))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes) -> tuple[str, int, dict[str, np.ndarray]]:
    """Parse and verify raw bytes; returns (config text, step, entries)."""
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    version, cfg_len = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    text = r.take(cfg_len, "config text")
    digest, step = r.unpack("<QQ", "config digest")
    (n_entries,) = r.unpack("<I", "entry count")
    entries: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        start = r.pos
        (name_len,) = r.unpack("<I", "entry name length")
        name = r.take(name_len, "entry name").decode("utf-8", errors="replace")
        tag, rank = r.unpack("<BI", f"header of '{name}'")
        if tag not in _DTYPES:
            raise CheckpointFormatError(f"unknown dtype tag {tag} for '{name}'", start)
        if rank > 8:
            raise CheckpointFormatError(f"implausible rank {rank} for '{name}'", start)
        shape = r.unpack(f"<{rank}I", f"extents of '{name}'")
        dt = _DTYPES[tag]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        payload = r.take(n_bytes, f"payload of '{name}'")
        entries[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    body_end = r.pos
    (stored,) = r.unpack("<Q", "content checksum")
    if r.pos != len(data):
        raise CheckpointFormatError("trailing bytes after checksum", r.pos)
    if _checksum(data[:body_end]) != stored:
        raise CheckpointIntegrityError("content checksum mismatch: file is corrupted or was modified")
    if fnv1a64(text) != digest:
        raise CheckpointIntegrityError("config digest mismatch")
    return text.decode("utf-8"), step, entries


def load_checkpoint(path, expect: Optional[TrainConfig] = None) -> tuple[TrainState, TrainConfig, int]:
    """Read a checkpoint back into a ``TrainState``.

    With ``expect``, the stored model config must match its ``vit`` section;
    otherwise the stored config is used as-is.
    """
    text, step, entries = decode_checkpoint(Path(path).read_bytes())
    try:
        cfg = TrainConfig.from_text(text)
    except ConfigError as exc:
        raise IncompatibleCheckpointError(f"stored config is not loadable: {exc}") from exc
    if expect is not None and expect.vit != cfg.vit:
        raise IncompatibleCheckpointError("checkpoint model config differs from the requested one")

    template = init_params(cfg.vit, _NullStream())
    student, teacher = {}, {}
    for name, ref in template.items():
        key = f"student/{name}"
        if key not in entries:
            raise IncompatibleCheckpointError(f"missing entry '{key}'")
        arr = entries[key]
        if arr.shape != ref.shape:
            raise IncompatibleCheckpointError(f"'{key}' has shape {arr.shape}, expected {ref.shape}")
        student[name] = Tensor(arr.copy(), requires_grad=ref.requires_grad, dtype=arr.dtype)
        tkey = f"teacher/{name}"
        if tkey in entries and not name.startswith(STUDENT_ONLY_PREFIXES):
            teacher[name] = Tensor(entries[tkey].copy(), dtype=entries[tkey].dtype)
    optim = AdamWState(
        m={k[len("optim.m/"):]: v.copy() for k, v in entries.items() if k.startswith("optim.m/")},
        v={k[len("optim.v/"):]: v.copy() for k, v in entries.items() if k.startswith("optim.v/")},
        step=int(entries["optim.step"][0]) if "optim.step" in entries else 0,
    )
    return TrainState(student, teacher or None, optim, cfg.vit), cfg, step


class _NullStream:
    """Stand-in init stream: only parameter shapes are needed."""

    class _Gen:
        def standard_normal(self, size=None):
            return np.zeros(size)

        def uniform(self, low=0.0, high=1.0, size=None):
            return np.zeros(size)

    gen = _Gen()
