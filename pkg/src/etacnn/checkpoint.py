"""Checkpoint container and its binary file format.

Layout (all integers little-endian)::

    b"MCNN"  u16 version  u16 section_count
    section*: u16 name_len, name (utf-8), u8 kind, u64 payload_len, payload
    checksum section: name "checksum", kind RAW, sha256 of every preceding byte

Section kinds: JSON (utf-8 text), F64 / I64 arrays (u8 ndim, u32 dims, data),
RAW bytes. Arrays are stored exactly, so a reloaded model reproduces the
saved one's forward pass bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from etacnn import nncore
from etacnn.dataio import Quantizer
from etacnn.errors import CheckpointError
from etacnn.maskgen import MaskSpec, validate_mask
from etacnn.model import MaskedCNN, ModelConfig

MAGIC = b"MCNN"
FORMAT_VERSION = 1

JSON, F64, I64, RAW = 0, 1, 2, 3


@dataclass
class Checkpoint:
    model: MaskedCNN
    quantizer: Quantizer
    fill_classes: np.ndarray  # per-segment training median class
    optimizer: dict = field(default_factory=lambda: {"name": "rmsprop", "learning_rate": 0.01,
                                                     "decay": 0.9, "epsilon": 1e-8})
    history: list = field(default_factory=list)
    train_config: dict = field(default_factory=dict)
    input_scaling: str = "2*class/(C-1)-1"
    format_version: int = FORMAT_VERSION

    @property
    def config(self) -> ModelConfig:
        return self.model.config


def _array_payload(arr: np.ndarray, dtype) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=dtype)
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(np.dtype(dtype).newbyteorder("<"), copy=False).tobytes()


def _section(name: str, kind: int, payload: bytes) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw + struct.pack("<BQ", kind, len(payload)) + payload


def to_bytes(cp: Checkpoint) -> bytes:
    sections = []
    meta = {
        "model_config": cp.model.config.to_dict(),
        "quantizer": {"level": cp.quantizer.level, "t_max": cp.quantizer.t_max},
        "optimizer": cp.optimizer,
        "history": cp.history,
        "train_config": cp.train_config,
        "input_scaling": cp.input_scaling,
        "n_layers": len(cp.model.layers),
        "mask_kinds": [l.mask.kind if l.mask is not None else None for l in cp.model.layers],
    }
    sections.append(_section("meta", JSON, json.dumps(meta, sort_keys=True).encode("utf-8")))
    sections.append(_section("fill_classes", I64, _array_payload(cp.fill_classes, "<i8")))
    for i, layer in enumerate(cp.model.layers):
        sections.append(_section(f"layer{i}.weight", F64, _array_payload(layer.weight, "<f8")))
        sections.append(_section(f"layer{i}.bias", F64, _array_payload(layer.bias, "<f8")))
        if layer.mask is not None:
            sections.append(_section(f"layer{i}.mask", F64, _array_payload(layer.mask.cells, "<f8")))
    body = MAGIC + struct.pack("<HH", cp.format_version, len(sections) + 1) + b"".join(sections)
    return body + _section("checksum", RAW, hashlib.sha256(body).digest())


def save_checkpoint(cp: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(cp))
    tmp.replace(path)


def _read_array(payload: bytes, dtype) -> np.ndarray:
    ndim = payload[0]
    dims = struct.unpack_from(f"<{ndim}I", payload, 1)
    offset = 1 + 4 * ndim
    arr = np.frombuffer(payload, dtype=dtype, offset=offset)
    if arr.size != int(np.prod(dims, dtype=np.int64)):
        raise CheckpointError("array payload size does not match its shape")
    return arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)


def from_bytes(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(data) < 8:
        raise CheckpointError("truncated checkpoint")
    version, count = struct.unpack_from("<HH", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    pos = 8
    sections = {}
    try:
        for _ in range(count):
            start = pos
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            kind, length = struct.unpack_from("<BQ", data, pos)
            pos += 9
            payload = data[pos : pos + length]
            if len(payload) != length:
                raise CheckpointError("truncated checkpoint section")
            pos += length
            if name == "checksum":
                if hashlib.sha256(data[:start]).digest() != payload:
                    raise CheckpointError("checksum mismatch: checkpoint is corrupted")
                sections[name] = payload
                break
            sections[name] = (kind, payload)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if "checksum" not in sections:
        raise CheckpointError("checkpoint has no checksum section")
    if pos != len(data):
        raise CheckpointError("trailing bytes after checksum")

    try:
        meta = json.loads(sections["meta"][1].decode("utf-8"))
        config = ModelConfig(**meta["model_config"])
        layers = []
        for i in range(meta["n_layers"]):
            weight = _read_array(sections[f"layer{i}.weight"][1], np.dtype("<f8"))
            bias = _read_array(sections[f"layer{i}.bias"][1], np.dtype("<f8"))
            mask = None
            if f"layer{i}.mask" in sections:
                cells = _read_array(sections[f"layer{i}.mask"][1], np.dtype("<f8"))
                mask = MaskSpec(size=cells.shape[0], kind=meta["mask_kinds"][i], variant=None, cells=cells)
                if validate_mask(mask):
                    raise CheckpointError(f"layer {i} mask breaks causality")
            layers.append(nncore.ConvLayerParams(weight, bias, mask))
        fill = _read_array(sections["fill_classes"][1], np.dtype("<i8"))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks section {exc}") from exc
    model = MaskedCNN(config, layers)
    return Checkpoint(
        model=model,
        quantizer=Quantizer(**meta["quantizer"]),
        fill_classes=fill,
        optimizer=meta["optimizer"],
        history=meta["history"],
        train_config=meta["train_config"],
        input_scaling=meta["input_scaling"],
        format_version=version,
    )


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    return from_bytes(path.read_bytes())
