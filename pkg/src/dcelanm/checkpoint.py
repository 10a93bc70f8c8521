"""Portable binary checkpoints.

Layout (little-endian)::

    b"DCLM" | u32 version | u32 config length | config (UTF-8 key=value lines)
    | u32 entry count | entries

    entry: u16 name length | name (UTF-8) | u8 rank | u32 dims[rank] | fp32 data
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import config_to_text, load_config, parse_config_text

MAGIC = b"DCLM"
VERSION = 1
MAE_PREFIX = "mae."
OPTIM_PREFIX = "optim."


class CheckpointError(Exception):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class Truncated(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict = field(default_factory=dict)  # str -> str
    tensors: dict = field(default_factory=dict)  # name -> np.ndarray

    def model_state(self, prefix: str | None = None) -> dict:
        return {
            k: v for k, v in self.tensors.items()
            if not k.startswith(OPTIM_PREFIX) and (prefix is None or k.startswith(prefix))
        }

    def optimizer_state(self) -> dict:
        n = len(OPTIM_PREFIX)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(OPTIM_PREFIX)}

    def configs(self):
        """Rebuild ``(NetworkConfig, TrainConfig)`` from the stored snapshot."""
        keys = {k: v for k, v in self.config.items() if k.startswith(("net.", "train."))}
        return load_config(None, keys)


def make_checkpoint(net, net_cfg, train_cfg=None, optimizer=None, extra: dict | None = None) -> Checkpoint:
    text = config_to_text(net_cfg, train_cfg, extra)
    # entries are stored as fp32; converting here keeps in-memory and decoded checkpoints identical
    tensors = {k: np.array(v, dtype=np.float32) for k, v in net.state_dict().items()}
    if optimizer is not None:
        tensors.update({OPTIM_PREFIX + k: np.array(v, dtype=np.float32) for k, v in optimizer.state_dict().items()})
    return Checkpoint(parse_config_text(text), tensors)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    blob = "".join(f"{k} = {v}\n" for k, v in ckpt.config.items()).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"entry {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(f"checkpoint truncated while reading {what} (offset {self.pos}, need {n} bytes)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if len(data) < 4:
        raise Truncated("checkpoint shorter than its magic number")
    if r.take(4, "magic") != MAGIC:
        raise BadMagic("not a DCLM checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this build reads version {VERSION}")
    (blob_len,) = r.unpack("<I", "config length")
    try:
        config = parse_config_text(r.take(blob_len, "config").decode("utf-8"), "checkpoint config")
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint config: {exc}") from exc
    (count,) = r.unpack("<I", "entry count")
    tensors = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"entry {i} name length")
        try:
            name = r.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"entry {i} has a corrupt name") from exc
        (rank,) = r.unpack("<B", f"{name} rank")
        shape = r.unpack(f"<{rank}I", f"{name} dims")
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * n, f"{name} data"), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last entry")
    return Checkpoint(config, tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    try:
        path.write_bytes(encode_checkpoint(ckpt))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)


def load_into(net, ckpt: Checkpoint, prefix: str | None = None) -> list[str]:
    """Copy stored weights into ``net``; with ``prefix`` (e.g. ``"mae."``) only
    matching entries are touched. Returns the loaded names."""
    state = ckpt.model_state(prefix)
    try:
        if prefix is None:
            return net.load_state_dict(state, strict=True)
        own = {n for n, _ in net.named_parameters()} | {n for n, _ in net.named_buffers()}
        if not any(n.startswith(prefix) for n in own):
            raise CheckpointError(f"the network has no '{prefix}' entries to load")
        missing = sorted(n for n in own if n.startswith(prefix) and n not in state)
        if missing:
            raise CheckpointError(f"checkpoint lacks {len(missing)} '{prefix}' entries, e.g. {missing[:3]}")
        return net.load_state_dict(state, strict=False)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match the network: {exc}") from exc
