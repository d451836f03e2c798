# src/lrclone/checkpoint.py
"""
Byte-deterministic checkpoint files for teachers, projections and students.

Layout (little-endian):

    magic "LRCK" | version u32 | kind u32
    config length u64 | config (canonical JSON, UTF-8)
    tensor count u32
    directory, per tensor: name length u16 | name | dtype u8 | ndim u8 |
        dims u64 × ndim | payload offset u64 | nbytes u64
    payload: row-major tensors in directory order, no padding
    checksum u64: FNV-1a over every preceding byte
"""

from __future__ import annotations

import json
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar

import numpy as np

from .config import ModelConfig, TrainConfig
from .enums import CheckpointKind
from .errors import ChecksumError, FormatError
from .model import WeightSet
from .optim import OptimizerState
from .projection import ProjectionSet, Provenance, StudentCheckpoint
from .tensor import Tensor
from .utils import canonical_json, fnv1a64, write_atomic

CHECKPOINT_VERSION = 1

_KIND_CODES = {CheckpointKind.teacher: 1, CheckpointKind.projection: 2, CheckpointKind.student: 3}
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}


class CheckpointLayout:
    preamble: ClassVar[struct.Struct] = struct.Struct("<4sIIQ")
    count: ClassVar[struct.Struct] = struct.Struct("<I")
    name_len: ClassVar[struct.Struct] = struct.Struct("<H")
    entry_head: ClassVar[struct.Struct] = struct.Struct("<BB")
    u64: ClassVar[struct.Struct] = struct.Struct("<Q")
    magic: ClassVar[bytes] = b"LRCK"


@dataclass(slots=True)
class Checkpoint:
    kind: CheckpointKind
    config: dict[str, Any]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _as_array(t: np.ndarray | Tensor) -> np.ndarray:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype.newbyteorder("<") not in _DTYPE_CODES:
        raise FormatError(f"unsupported tensor dtype {arr.dtype}; checkpoints hold float32 or float64")
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def _directory_entry_size(name: str, ndim: int) -> int:
    return (
        CheckpointLayout.name_len.size
        + len(name.encode("utf-8"))
        + CheckpointLayout.entry_head.size
        + CheckpointLayout.u64.size * (ndim + 2)
    )


def checkpoint_size(config: Mapping[str, Any], tensors: Mapping[str, np.ndarray | Tensor]) -> int:
    """Exact file size: header + Σ tensor bytes + 8."""
    header = CheckpointLayout.preamble.size + len(canonical_json(config).encode("utf-8")) + CheckpointLayout.count.size
    header += sum(_directory_entry_size(n, np.ndim(t.data if isinstance(t, Tensor) else t)) for n, t in tensors.items())
    payload = sum(_as_array(t).nbytes for t in tensors.values())
    return header + payload + CheckpointLayout.u64.size


def encode_checkpoint(
    kind: CheckpointKind,
    config: Mapping[str, Any],
    tensors: Mapping[str, np.ndarray | Tensor],
) -> bytes:
    blob = canonical_json(config).encode("utf-8")
    arrays = [(name, _as_array(t)) for name, t in tensors.items()]
    parts = [
        CheckpointLayout.preamble.pack(CheckpointLayout.magic, CHECKPOINT_VERSION, _KIND_CODES[kind], len(blob)),
        blob,
        CheckpointLayout.count.pack(len(arrays)),
    ]
    offset = 0
    for name, arr in arrays:
        raw_name = name.encode("utf-8")
        parts.append(CheckpointLayout.name_len.pack(len(raw_name)))
        parts.append(raw_name)
        parts.append(CheckpointLayout.entry_head.pack(_DTYPE_CODES[arr.dtype], arr.ndim))
        parts.extend(CheckpointLayout.u64.pack(d) for d in arr.shape)
        parts.append(CheckpointLayout.u64.pack(offset))
        parts.append(CheckpointLayout.u64.pack(arr.nbytes))
        offset += arr.nbytes
    parts.extend(arr.tobytes() for _, arr in arrays)
    body = b"".join(parts)
    return body + CheckpointLayout.u64.pack(fnv1a64(body))


def write_checkpoint(
    kind: CheckpointKind,
    config: Mapping[str, Any],
    tensors: Mapping[str, np.ndarray | Tensor],
    path: Path,
) -> int:
    data = encode_checkpoint(kind, config, tensors)
    write_atomic(Path(path), data)
    return len(data)


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    pre = CheckpointLayout.preamble
    if len(buf) < pre.size + CheckpointLayout.u64.size:
        raise FormatError(f"{source}: truncated checkpoint ({len(buf)} bytes)", offset=len(buf))
    magic, version, kind_code, blob_len = pre.unpack_from(buf, 0)
    if magic != CheckpointLayout.magic:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {CheckpointLayout.magic!r}", offset=0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}", offset=4)

    body_end = len(buf) - CheckpointLayout.u64.size
    (stored,) = CheckpointLayout.u64.unpack_from(buf, body_end)
    actual = fnv1a64(memoryview(buf)[:body_end])
    if stored != actual:
        raise ChecksumError(
            f"{source}: checksum mismatch (stored {stored:016x}, computed {actual:016x})", offset=body_end
        )

    kinds = {v: k for k, v in _KIND_CODES.items()}
    if kind_code not in kinds:
        raise FormatError(f"{source}: unknown checkpoint kind code {kind_code}", offset=8)
    kind = kinds[kind_code]

    offset = pre.size
    if offset + blob_len > body_end:
        raise FormatError(f"{source}: config blob overruns file", offset=offset)
    try:
        config = json.loads(buf[offset : offset + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{source}: unreadable config blob: {e}", offset=offset) from None
    offset += blob_len

    def _unpack(s: struct.Struct) -> tuple[Any, ...]:
        nonlocal offset
        if offset + s.size > body_end:
            raise FormatError(f"{source}: truncated tensor directory", offset=offset)
        vals = s.unpack_from(buf, offset)
        offset += s.size
        return vals

    (count,) = _unpack(CheckpointLayout.count)
    codes = {v: k for k, v in _DTYPE_CODES.items()}
    entries = []
    for _ in range(count):
        (n_len,) = _unpack(CheckpointLayout.name_len)
        if offset + n_len > body_end:
            raise FormatError(f"{source}: truncated tensor name", offset=offset)
        name = buf[offset : offset + n_len].decode("utf-8")
        offset += n_len
        dtype_code, ndim = _unpack(CheckpointLayout.entry_head)
        if dtype_code not in codes:
            raise FormatError(f"{source}: tensor {name!r} has unknown dtype code {dtype_code}", offset=offset - 2)
        dims = tuple(_unpack(CheckpointLayout.u64)[0] for _ in range(ndim))
        (t_off,) = _unpack(CheckpointLayout.u64)
        (nbytes,) = _unpack(CheckpointLayout.u64)
        entries.append((name, codes[dtype_code], dims, t_off, nbytes))

    payload_start = offset
    payload_len = body_end - payload_start
    tensors: dict[str, np.ndarray] = {}
    cursor = 0
    for name, dtype, dims, t_off, nbytes in entries:
        expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise FormatError(f"{source}: tensor {name!r} declares {nbytes} bytes, shape needs {expected}")
        if t_off < cursor or t_off + nbytes > payload_len:
            raise FormatError(
                f"{source}: tensor {name!r} at [{t_off}, {t_off + nbytes}) overlaps or leaves the payload",
                offset=payload_start + t_off,
            )
        if name in tensors:
            raise FormatError(f"{source}: duplicate tensor name {name!r}")
        arr = np.frombuffer(buf, dtype=dtype, count=expected // dtype.itemsize, offset=payload_start + t_off)
        tensors[name] = arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
        cursor = t_off + nbytes
    if cursor != payload_len:
        raise FormatError(f"{source}: {payload_len - cursor} unaccounted payload bytes", offset=payload_start + cursor)
    return Checkpoint(kind=kind, config=config, tensors=tensors)


def read_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


def _expect_kind(ckpt: Checkpoint, path: Path, *kinds: CheckpointKind) -> None:
    if ckpt.kind not in kinds:
        wanted = " or ".join(k.value for k in kinds)
        raise FormatError(f"{path}: expected a {wanted} checkpoint, found {ckpt.kind.value}")


# model weights


def save_weights(
    path: Path,
    weights: WeightSet,
    kind: CheckpointKind = CheckpointKind.teacher,
    provenance: Provenance | None = None,
) -> int:
    config: dict[str, Any] = {"model": weights.config.model_dump(mode="json")}
    if provenance is not None:
        config["provenance"] = provenance.as_dict()
    return write_checkpoint(kind, config, dict(weights.named_tensors()), path)


def load_weights(path: Path) -> tuple[WeightSet, Checkpoint]:
    """Teacher or student checkpoint into a plain WeightSet."""
    ckpt = read_checkpoint(path)
    _expect_kind(ckpt, path, CheckpointKind.teacher, CheckpointKind.student)
    cfg = ModelConfig.model_validate(ckpt.config["model"])
    return WeightSet.from_named(cfg, ckpt.tensors), ckpt


def save_student(path: Path, student: StudentCheckpoint) -> int:
    return save_weights(path, student.weights, CheckpointKind.student, student.provenance)


# projections with training state


@dataclass(slots=True)
class ProjectionState:
    proj: ProjectionSet
    train: TrainConfig
    step: int = 0
    optimizer: OptimizerState | None = None
    spikes: int = 0
    cursor: int = 0
    teacher_hash: str = ""


def save_projection(path: Path, state: ProjectionState) -> int:
    named = state.proj.named_parameters()
    tensors: dict[str, np.ndarray | Tensor] = dict(named)
    config: dict[str, Any] = {
        "projection": state.proj.meta(),
        "train": state.train.model_dump(mode="json"),
        "step": state.step,
        "spikes": state.spikes,
        "cursor": state.cursor,
        "teacher_hash": state.teacher_hash,
    }
    if state.optimizer is not None:
        config["adam_step"] = state.optimizer.step
        for (name, _), m, v in zip(named, state.optimizer.m, state.optimizer.v, strict=True):
            tensors[f"adam.m.{name}"] = m
            tensors[f"adam.v.{name}"] = v
    return write_checkpoint(CheckpointKind.projection, config, tensors, path)


def load_projection(path: Path) -> ProjectionState:
    ckpt = read_checkpoint(path)
    _expect_kind(ckpt, path, CheckpointKind.projection)
    cfg = ckpt.config
    params = {n: t for n, t in ckpt.tensors.items() if not n.startswith("adam.")}
    proj = ProjectionSet.from_named(cfg["projection"], params)
    optimizer = None
    if "adam_step" in cfg:
        names = [n for n, _ in proj.named_parameters()]
        optimizer = OptimizerState(
            step=int(cfg["adam_step"]),
            m=[ckpt.tensors[f"adam.m.{n}"].copy() for n in names],
            v=[ckpt.tensors[f"adam.v.{n}"].copy() for n in names],
        )
    return ProjectionState(
        proj=proj,
        train=TrainConfig.model_validate(cfg["train"]),
        step=int(cfg.get("step", 0)),
        optimizer=optimizer,
        spikes=int(cfg.get("spikes", 0)),
        cursor=int(cfg.get("cursor", 0)),
        teacher_hash=str(cfg.get("teacher_hash", "")),
    )
