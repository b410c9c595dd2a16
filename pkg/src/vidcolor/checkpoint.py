"""``CDK1`` checkpoint files and the named-tensor :class:`ParamStore`.

Layout (all integers little-endian)::

    b"CDK1"  u32 entry_count
    per entry: u16 name_len, name (UTF-8), u8 rank, rank x u32 dims,
               u8 dtype (0 = f32, 1 = raw u8 bytes), payload
    u64 FNV-1a of every preceding byte

dtype 1 carries metadata blobs (architecture config, the hash of a frozen
model a checkpoint depends on); tensors are always f32.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .kernels import fnv1a64

MAGIC = b"CDK1"
DTYPE_F32 = 0
DTYPE_BYTES = 1
META_PREFIX = "__meta__."


class CheckpointError(ValueError):
    pass


class FrozenWeightError(RuntimeError):
    """A parameter declared frozen was modified."""


def encode_entries(entries: "OrderedDict[str, np.ndarray | bytes]") -> bytes:
    parts = [MAGIC, struct.pack("<I", len(entries))]
    for name, value in entries.items():
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        if isinstance(value, (bytes, bytearray)):
            parts.append(struct.pack("<BI", 1, len(value)))
            parts.append(struct.pack("<B", DTYPE_BYTES))
            parts.append(bytes(value))
            continue
        arr = np.asarray(value, dtype="<f4")  # tobytes() emits C order; keeps rank-0 arrays rank 0
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", DTYPE_F32))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def decode_entries(data: bytes) -> "OrderedDict[str, np.ndarray | bytes]":
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not a CDK1 checkpoint")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if fnv1a64(body) != stored:
        raise CheckpointError("checksum mismatch (corrupt or truncated checkpoint)")
    (count,) = struct.unpack_from("<I", body, 4)
    pos = 8
    out: "OrderedDict[str, np.ndarray | bytes]" = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            (dtype,) = struct.unpack_from("<B", body, pos)
            pos += 1
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if dtype not in (DTYPE_F32, DTYPE_BYTES):
                raise CheckpointError(f"unknown dtype code {dtype} for entry {name}")
            nbytes = 4 * n if dtype == DTYPE_F32 else n
            if pos + nbytes > len(body):
                raise CheckpointError(f"entry {name} runs past end of file")
            if dtype == DTYPE_F32:
                arr = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(dims)
                out[name] = arr.astype(np.float32)
            else:
                out[name] = body[pos : pos + nbytes]
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError("truncated checkpoint") from exc
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes before checksum")
    return out


class ParamStore:
    """Named float32 tensors of one component, with per-entry freeze flags."""

    def __init__(self, tensors=None, frozen=(), meta=None):
        self.tensors: "OrderedDict[str, np.ndarray]" = OrderedDict(
            (k, np.asarray(v, dtype=np.float32)) for k, v in (tensors or {}).items()
        )
        self.frozen = set(frozen)
        self.meta: dict[str, bytes] = dict(meta or {})

    @classmethod
    def from_module(cls, module: torch.nn.Module, frozen: bool = False, meta=None) -> "ParamStore":
        tensors = OrderedDict(
            (k, v.detach().cpu().to(torch.float32).numpy().copy()) for k, v in module.state_dict().items()
        )
        return cls(tensors, frozen=tensors.keys() if frozen else (), meta=meta)

    def load_into(self, module: torch.nn.Module) -> torch.nn.Module:
        state = module.state_dict()
        missing = set(state) - set(self.tensors)
        unexpected = set(self.tensors) - set(state)
        if missing or unexpected:
            raise CheckpointError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}")
        wrong = [k for k, v in self.tensors.items() if tuple(v.shape) != tuple(state[k].shape)]
        if wrong:
            k = wrong[0]
            raise CheckpointError(f"shape mismatch for {k}: stored {self.tensors[k].shape}, module {tuple(state[k].shape)}")
        module.load_state_dict(
            {k: torch.from_numpy(v.copy()).to(state[k].dtype) for k, v in self.tensors.items()}
        )
        return module

    def __len__(self) -> int:
        return len(self.tensors)

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def to_bytes(self) -> bytes:
        entries: "OrderedDict[str, np.ndarray | bytes]" = OrderedDict(self.tensors)
        for key, blob in sorted(self.meta.items()):
            entries[META_PREFIX + key] = blob
        if self.frozen:
            entries[META_PREFIX + "frozen"] = "\n".join(sorted(self.frozen)).encode("utf-8")
        return encode_entries(entries)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamStore":
        tensors, meta, frozen = OrderedDict(), {}, set()
        for name, value in decode_entries(data).items():
            if name.startswith(META_PREFIX):
                key = name[len(META_PREFIX):]
                if key == "frozen":
                    frozen = set(value.decode("utf-8").split("\n")) - {""}
                else:
                    meta[key] = value
            else:
                tensors[name] = value
        return cls(tensors, frozen=frozen, meta=meta)

    def save(self, path) -> str:
        """Write the checkpoint; returns its content hash."""
        data = self.to_bytes()
        try:
            Path(path).write_bytes(data)
        except OSError as exc:
            raise OSError(f"failed to write checkpoint {path}: {exc}") from exc
        return file_hash(data)

    @classmethod
    def load(cls, path) -> "ParamStore":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise OSError(f"failed to read checkpoint {path}: {exc}") from exc
        try:
            return cls.from_bytes(data)
        except CheckpointError as exc:
            raise CheckpointError(f"{path}: {exc}") from exc

    def content_hash(self, names=None) -> str:
        """FNV-1a over the tensors' CDK1 encoding (all, or only ``names``)."""
        keys = list(self.tensors) if names is None else [k for k in self.tensors if k in set(names)]
        return file_hash(encode_entries(OrderedDict((k, self.tensors[k]) for k in keys)))


def file_hash(data: bytes) -> str:
    return f"{fnv1a64(data):016x}"


def module_hash(module: torch.nn.Module) -> str:
    """Content hash of a module's full state (parameters and buffers)."""
    return ParamStore.from_module(module).content_hash()


def check_unchanged(before: str, module: torch.nn.Module, what: str) -> None:
    after = module_hash(module)
    if after != before:
        raise FrozenWeightError(f"frozen {what} weights changed during training ({before} -> {after})")
