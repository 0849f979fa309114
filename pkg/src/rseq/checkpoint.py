"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"RSEQCKPT"
    u32       format version
    u64       header length in bytes
    ...       header: UTF-8 ``key = value`` lines (model config, train state, run info)
    u64       tensor count
    per tensor:
      u64     name length, then the UTF-8 name
      u64     rank, then rank u64 extents
      ...     prod(extents) float32 values, little-endian, row-major

Parameters are stored as ``param/<name>``; Adam moments as ``adam_m/<name>``
and ``adam_v/<name>``.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from rseq import numerics as nx
from rseq.errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from rseq.model import ModelConfig, RTransformerModel
from rseq.numerics import Rng
from rseq.training import TrainState

MAGIC = b"RSEQCKPT"
FORMAT_VERSION = 1
_DATA_DTYPE = np.dtype("<f4")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_field(kind, text: str):
    if kind is bool or kind == "bool":
        return text == "true"
    if kind is int or kind == "int":
        return int(text)
    if kind is float or kind == "float":
        return float(text)
    return text


def _header_text(model: RTransformerModel, state: TrainState, extra: dict | None) -> str:
    lines = [f"format_version = {FORMAT_VERSION}",
             f"precision = {nx.precision_name(model.parameters()[0].dtype)}"]
    for f in fields(ModelConfig):
        lines.append(f"model.{f.name} = {_fmt(getattr(model.config, f.name))}")
    lines += [
        f"state.step = {state.step}",
        f"state.epoch = {state.epoch}",
        f"state.current_lr = {state.current_lr!r}",
        f"state.best_val = {state.best_val!r}",
        f"state.plateau_counter = {state.plateau_counter}",
        f"state.rng = {state.rng.get_state()}",
    ]
    for key in sorted(extra or {}):
        lines.append(f"run.{key} = {extra[key]}")
    return "\n".join(lines) + "\n"


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<Q", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_DATA_DTYPE).tobytes())


def checkpoint_bytes(model: RTransformerModel, state: TrainState, extra: dict | None = None) -> bytes:
    header = _header_text(model, state, extra).encode("utf-8")
    tensors = [(f"param/{n}", p.data) for n, p in model.named_parameters()]
    for name in sorted(state.moments):
        m, v = state.moments[name]
        tensors += [(f"adam_m/{name}", m), (f"adam_v/{name}", v)]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    buf.write(struct.pack("<Q", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    return buf.getvalue()


def save_checkpoint(model: RTransformerModel, state: TrainState, path, extra: dict | None = None) -> None:
    """Write atomically: a crash mid-write never clobbers the previous checkpoint."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, state, extra))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError(f"{self.path}: file ends at byte {len(self.raw)}, "
                                           f"needed {self.pos + n}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Parse a checkpoint file into its header mapping and named float32 arrays."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    (hlen,) = r.unpack("<Q")
    header = {}
    for line in r.take(hlen).decode("utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition(" = ")
            header[key] = value
    (count,) = r.unpack("<Q")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<Q")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<Q")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        n = math.prod(shape)
        tensors[name] = np.frombuffer(r.take(n * 4), dtype=_DATA_DTYPE).reshape(shape)
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: {len(r.raw) - r.pos} unexpected trailing bytes")
    return header, tensors


def config_from_header(header: dict[str, str]) -> ModelConfig:
    kw = {}
    for f in fields(ModelConfig):
        key = f"model.{f.name}"
        if key not in header:
            raise CheckpointError(f"checkpoint header lacks {key}")
        kw[f.name] = _parse_field(f.type, header[key])
    return ModelConfig(**kw)


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> tuple[RTransformerModel, TrainState]:
    """Rebuild the model and train state. Nothing is returned unless every tensor loads cleanly."""
    header, tensors = read_checkpoint(path)
    config = config_from_header(header)
    if expect_config is not None and expect_config != config:
        raise CheckpointShapeError(f"{path}: stored model config {config} differs from {expect_config}")
    dtype = {"f32": np.float32, "f64": np.float64}[header.get("precision", "f32")]
    with nx.precision(nx.precision_name(dtype)):
        model = RTransformerModel(config, Rng(0))
    for name, p in model.named_parameters():
        key = f"param/{name}"
        if key not in tensors:
            raise CheckpointShapeError(f"{path}: missing tensor {key}")
        arr = tensors[key]
        if arr.shape != p.shape:
            raise CheckpointShapeError(f"{path}: tensor {key} has shape {arr.shape}, model expects {p.shape}")
        p.data = arr.astype(dtype)
    expected = {f"param/{n}" for n, _ in model.named_parameters()}
    extra = sorted(k for k in tensors if k.startswith("param/") and k not in expected)
    if extra:
        raise CheckpointShapeError(f"{path}: tensors not in model: {extra}")
    moments = {}
    for key, arr in tensors.items():
        if key.startswith("adam_m/"):
            name = key[len("adam_m/"):]
            v = tensors.get(f"adam_v/{name}")
            if v is None or v.shape != arr.shape:
                raise CheckpointShapeError(f"{path}: adam moments for {name} are inconsistent")
            moments[name] = (arr.astype(dtype), v.astype(dtype))
    state = TrainState(
        current_lr=float(header["state.current_lr"]),
        step=int(header["state.step"]),
        epoch=int(header["state.epoch"]),
        best_val=float(header["state.best_val"]),
        plateau_counter=int(header["state.plateau_counter"]),
        moments=moments,
        rng=Rng.from_state(header["state.rng"]),
    )
    return model, state


def run_info(path) -> dict[str, str]:
    header, _ = read_checkpoint(path)
    return {k[len("run."):]: v for k, v in header.items() if k.startswith("run.")}
