"""Versioned binary checkpoints.

Layout (little-endian)::

    b"DDGCKPT\\0"  u32 version  u32 n_sections
    n_sections x (16-byte zero-padded name, u64 offset, u64 length)
    section payloads, in table order

Sections:

* ``config``   canonical JSON of the RunConfig (UTF-8)
* ``student``  tensor bundle
* ``teacher``  f64 decay, then a tensor bundle
* ``codebook`` u64 N, u64 d_c, f64 gamma, u64 mode code, then f64 codewords
               (N*d_c, row-major), counts (N), sums (N*d_c)
* ``state``    u64 iteration, f64 best validation accuracy

A tensor bundle is u32 count, then per tensor: u16 name length, name bytes,
u32 ndim, ndim x u64 dims, f64 values row-major.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .codebook import MODES, Codebook
from .config import RunConfig, canonical_json, run_config_from_dict
from .model import ModelParams, TeacherState

MAGIC = b"DDGCKPT\0"
VERSION = 1
SECTIONS = ("config", "student", "teacher", "codebook", "state")


@dataclass
class Checkpoint:
    config: RunConfig
    student: ModelParams
    teacher: TeacherState
    codebook: Codebook
    iteration: int
    best_val: float
    version: int = VERSION


def _f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _bundle(params: ModelParams) -> bytes:
    named = params.named_parameters()
    out = [struct.pack("<I", len(named))]
    for name, t in named:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<I", t.data.ndim) + struct.pack(f"<{t.data.ndim}Q", *t.shape))
        out.append(_f64(t.data))
    return b"".join(out)


def _unbundle(raw: bytes, requires_grad: bool) -> ModelParams:
    (count,) = struct.unpack_from("<I", raw, 0)
    off = 4
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(shape)
        off += 8 * size
        tensors[name] = Tensor(data, requires_grad=requires_grad)
    layers = []
    i = 0
    while f"encoder.{i}.weight" in tensors:
        layers.append((tensors[f"encoder.{i}.weight"], tensors[f"encoder.{i}.bias"]))
        i += 1
    return ModelParams(layers, (tensors["head.weight"], tensors["head.bias"]))


def _codebook_bytes(cb: Codebook) -> bytes:
    n, d = cb.codewords.shape
    head = struct.pack("<QQdQ", n, d, cb.gamma, MODES.index(cb.mode))
    return head + _f64(cb.codewords.data) + _f64(cb.ema_counts) + _f64(cb.ema_sums)


def _codebook_from(raw: bytes) -> Codebook:
    n, d, gamma, mode = struct.unpack_from("<QQdQ", raw, 0)
    off = 32
    words = np.frombuffer(raw, "<f8", n * d, off).astype(np.float64).reshape(n, d)
    off += 8 * n * d
    counts = np.frombuffer(raw, "<f8", n, off).astype(np.float64)
    off += 8 * n
    sums = np.frombuffer(raw, "<f8", n * d, off).astype(np.float64).reshape(n, d)
    return Codebook(Tensor(words), counts, sums, gamma, MODES[mode])


def to_bytes(ck: Checkpoint) -> bytes:
    payloads = {
        "config": canonical_json(ck.config.to_dict()).encode("utf-8"),
        "student": _bundle(ck.student),
        "teacher": struct.pack("<d", ck.teacher.decay) + _bundle(ck.teacher.params),
        "codebook": _codebook_bytes(ck.codebook),
        "state": struct.pack("<Qd", ck.iteration, ck.best_val),
    }
    header = MAGIC + struct.pack("<II", ck.version, len(SECTIONS))
    table_size = len(SECTIONS) * 32
    offset = len(header) + table_size
    table, body = [], []
    for name in SECTIONS:
        data = payloads[name]
        table.append(name.encode("ascii").ljust(16, b"\0") + struct.pack("<QQ", offset, len(data)))
        body.append(data)
        offset += len(data)
    return header + b"".join(table) + b"".join(body)


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    sections = {}
    for i in range(count):
        entry = raw[16 + 32 * i: 16 + 32 * (i + 1)]
        name = entry[:16].rstrip(b"\0").decode("ascii")
        off, length = struct.unpack("<QQ", entry[16:])
        sections[name] = raw[off:off + length]
    missing = [s for s in SECTIONS if s not in sections]
    if missing:
        raise ValueError(f"checkpoint lacks section {missing[0]!r}")
    config = run_config_from_dict(json.loads(sections["config"].decode("utf-8")))
    (decay,) = struct.unpack_from("<d", sections["teacher"], 0)
    iteration, best = struct.unpack("<Qd", sections["state"])
    return Checkpoint(config, _unbundle(sections["student"], True),
                      TeacherState(_unbundle(sections["teacher"][8:], False), decay),
                      _codebook_from(sections["codebook"]), iteration, best, version)


def save(ck: Checkpoint, path) -> bytes:
    raw = to_bytes(ck)
    with open(path, "wb") as fh:
        fh.write(raw)
    return raw


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
