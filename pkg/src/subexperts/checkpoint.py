"""Binary checkpoints of a continual run.

Layout, all little-endian::

    magic   8 bytes  b"SUBXCKPT"
    version u16
    length  u64      total file size, checksum included
    body    ...      config text, live tensors, snapshots, matrix, step log
    digest  8 bytes  blake2b (64-bit) over every preceding byte

Tensors are written as ``u8 rank, u64 extents..., f64 data``; masks as
``u8 rank, u64 extents..., packed bits`` with the first entry in the least
significant bit of the first byte.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import build_backbone
from .config import RunConfig, parse_config_text
from .errors import CheckpointError, ChecksumError, TruncatedError, VersionError
from .metrics import AccuracyMatrix
from .numeric import DTensor
from .trainer import ContinualLearner, RunState, StepRecord, TaskSnapshot, _readonly, site_name

MAGIC = b"SUBXCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sHQ")
_DIGEST = 8


def checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=_DIGEST).digest()


def pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=bool).reshape(-1), bitorder="little").tobytes()


def unpack_bits(raw: bytes, shape: tuple[int, ...]) -> np.ndarray:
    n = int(np.prod(shape, dtype=np.int64))
    flat = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=n, bitorder="little")
    return flat.astype(bool).reshape(shape)


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def raw(self, b: bytes) -> None:
        self.buf.write(b)

    def u8(self, v: int) -> None:
        self.raw(struct.pack("<B", v))

    def u32(self, v: int) -> None:
        self.raw(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self.raw(struct.pack("<Q", v))

    def i64(self, v: int) -> None:
        self.raw(struct.pack("<q", v))

    def f64(self, v: float) -> None:
        self.raw(struct.pack("<d", v))

    def text(self, s: str) -> None:
        b = s.encode("utf-8")
        self.u32(len(b))
        self.raw(b)

    def shape(self, shape: tuple[int, ...]) -> None:
        self.u8(len(shape))
        for n in shape:
            self.u64(n)

    def tensor(self, a: np.ndarray) -> None:
        a = np.asarray(a, dtype=np.float64)
        self.shape(a.shape)
        self.raw(a.astype("<f8").tobytes())

    def bits(self, a: np.ndarray) -> None:
        self.shape(np.shape(a))
        self.raw(pack_bits(a))


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data, self.pos = data, pos

    def raw(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedError(f"checkpoint ends inside a record at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def _unpack(self, fmt: str):
        return struct.unpack(fmt, self.raw(struct.calcsize(fmt)))[0]

    def u8(self) -> int:
        return self._unpack("<B")

    def u32(self) -> int:
        return self._unpack("<I")

    def u64(self) -> int:
        return self._unpack("<Q")

    def i64(self) -> int:
        return self._unpack("<q")

    def f64(self) -> float:
        return self._unpack("<d")

    def text(self) -> str:
        return self.raw(self.u32()).decode("utf-8")

    def shape(self) -> tuple[int, ...]:
        return tuple(self.u64() for _ in range(self.u8()))

    def tensor(self) -> np.ndarray:
        shape = self.shape()
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.raw(8 * n), dtype="<f8").astype(np.float64).reshape(shape)

    def bits(self) -> np.ndarray:
        shape = self.shape()
        n = int(np.prod(shape, dtype=np.int64))
        return unpack_bits(self.raw((n + 7) // 8), shape)


@dataclass
class Checkpoint:
    config: RunConfig
    state: RunState


def encode(state: RunState, config: RunConfig) -> bytes:
    learner = state.learner
    w = _Writer()
    w.text(config.to_text())
    w.raw(bytes.fromhex(config.digest()))
    w.i64(config.backbone_seed)
    w.text(learner.backbone.checksum())
    w.u32(state.done)
    w.u64(learner.step)

    for group in (learner.adapter_params(), learner.score_tensors()):
        w.u32(len(group))
        for name, t in group.items():
            w.text(name)
            w.tensor(t.data)
    live = learner.live_masks()
    w.u32(len(live))
    for name, bits in live.items():
        w.text(name)
        w.bits(bits)

    w.tensor(state.matrix.values)

    w.u32(len(learner.snapshots))
    for phase in sorted(learner.snapshots):
        snap = learner.snapshots[phase]
        w.u32(phase)
        w.u32(len(snap.masks))
        for site, per in snap.masks.items():
            w.text(site)
            w.u32(len(per))
            for name, bits in per.items():
                w.text(name)
                w.bits(bits)
        w.u32(len(snap.prompts))
        for layer in sorted(snap.prompts):
            w.u32(layer)
            w.tensor(snap.prompts[layer])
        w.tensor(snap.key)
        w.u32(len(snap.heads))
        for task in sorted(snap.heads):
            wt, b = snap.heads[task]
            w.u32(task)
            w.tensor(wt)
            w.tensor(b)
        w.text(json.dumps(snap.stamp, sort_keys=True))

    w.u64(len(state.logs))
    for rec in state.logs:
        w.u64(rec.step)
        w.u32(rec.task)
        w.u32(rec.epoch)
        w.f64(rec.task_loss)
        w.f64(rec.pull_loss)
        w.f64(rec.total_loss)

    body = w.buf.getvalue()
    header = _HEADER.pack(MAGIC, VERSION, _HEADER.size + len(body) + _DIGEST)
    return header + body + checksum(header + body)


def save_checkpoint(state: RunState, config: RunConfig, path: str | os.PathLike) -> Path:
    path = Path(path)
    data = encode(state, config)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def decode(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size + _DIGEST:
        raise TruncatedError(f"checkpoint has only {len(data)} bytes")
    magic, version, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(data) < length:
        raise TruncatedError(f"checkpoint declares {length} bytes but holds {len(data)}")
    if len(data) > length:
        raise ChecksumError(f"{len(data) - length} unexpected trailing bytes")
    if checksum(data[:-_DIGEST]) != data[-_DIGEST:]:
        raise ChecksumError("checksum mismatch; the file is corrupt")
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {VERSION}")

    r = _Reader(data[:-_DIGEST], _HEADER.size)
    text = r.text()
    digest = r.raw(32).hex()
    config = parse_config_text(text, env={}, source="<checkpoint>")
    if config.digest() != digest:
        raise CheckpointError("stored config does not match its recorded hash")
    seed = r.i64()
    if seed != config.backbone_seed:
        raise CheckpointError("backbone seed disagrees with the stored config")
    backbone = build_backbone(config.backbone, seed)
    if backbone.checksum() != r.text():
        raise CheckpointError("rebuilt backbone differs from the one used for training")
    learner = ContinualLearner(backbone, config.adapter, config.prompt, config.trainer)
    done = r.u32()
    learner.step = r.u64()

    for group in (learner.adapter_params(), learner.score_tensors()):
        _restore(group, r)
    masks = learner.mose_sites()
    for _ in range(r.u32()):
        name, bits = r.text(), r.bits()
        site, _, key = name.partition("/")
        found = [s for s in masks if site_name(s) == site]
        if not found:
            raise CheckpointError(f"live mask {name!r} has no matching adapter")
        masks[found[0]].score_masks()[key].assign(bits)

    values = r.tensor()
    matrix = AccuracyMatrix(values.shape[1], values.shape[0])
    matrix.values = values.copy()

    sites = {site_name(s): a for s, a in masks.items()}
    for _ in range(r.u32()):
        phase = r.u32()
        snap_masks = {}
        for _ in range(r.u32()):
            site = r.text()
            per = {}
            for _ in range(r.u32()):
                name = r.text()
                per[name] = _readonly(r.bits())
            snap_masks[site] = per
            if site not in sites:
                raise CheckpointError(f"snapshot {phase} names unknown site {site}")
            sites[site].frozen_masks[phase] = per
        prompts = {}
        for _ in range(r.u32()):
            layer = r.u32()
            prompts[layer] = _readonly(r.tensor())
        key = _readonly(r.tensor())
        heads = {}
        for _ in range(r.u32()):
            task = r.u32()
            heads[task] = (_readonly(r.tensor()), _readonly(r.tensor()))
        stamp = json.loads(r.text())
        for layer, e in prompts.items():
            learner.pool.prompts[(phase, layer)] = DTensor(e.copy())
        learner.pool.freeze(phase)
        learner.keys.keys[phase] = DTensor(key.copy())
        learner.keys.freeze(phase)
        for task, (wt, b) in heads.items():
            learner.heads[task] = (DTensor(wt.copy()), DTensor(b.copy()))
            learner.head_owner[task] = phase
        learner.snapshots[phase] = TaskSnapshot(phase, snap_masks, prompts, key, heads, stamp)

    logs = []
    for _ in range(r.u64()):
        step, task, epoch = r.u64(), r.u32(), r.u32()
        logs.append(StepRecord(step, task, epoch, r.f64(), r.f64(), r.f64()))
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} unread bytes after the step log")
    return Checkpoint(config, RunState(learner, matrix, logs, done))


def _restore(group: dict[str, DTensor], r: _Reader) -> None:
    n = r.u32()
    if n != len(group):
        raise CheckpointError(f"checkpoint holds {n} tensors where the config builds {len(group)}")
    for _ in range(n):
        name, arr = r.text(), r.tensor()
        if name not in group or group[name].shape != arr.shape:
            raise CheckpointError(f"tensor {name!r} {arr.shape} does not fit the configured adapters")
        group[name].data[...] = arr


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode(data)
