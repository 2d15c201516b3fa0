"""Checkpoint files: a text manifest followed by raw float32 payloads.

Layout::

    apecopy-checkpoint 1
    meta.step 120
    config.d 32
    ...
    tensor emb.token 104,32 0 3328
    tensor encoder.0.attn.wq 32,32 13312 1024
    payload
    <raw little-endian float32 bytes, one contiguous block per tensor>

Offsets are byte positions into the payload.  Round-trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import ConfigError

MAGIC = "apecopy-checkpoint 1"


@dataclass
class Checkpoint:
    meta: dict  # string key/value pairs (step counter, seed, ...)
    config: ModelConfig
    tensors: dict  # name -> float32 ndarray


def save_checkpoint(path, config: ModelConfig, tensors: dict, meta: dict | None = None) -> None:
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        lines.append(f"meta.{key} {value}")
    for f in dataclasses.fields(config):
        lines.append(f"config.{f.name} {getattr(config, f.name)}")

    blobs = []
    offset = 0
    for name, arr in tensors.items():
        data = arr.data if hasattr(arr, "requires_grad") else np.asarray(arr)
        if data.dtype != np.float32:
            raise ConfigError(
                f"checkpoint payloads are 32-bit floats; tensor {name!r} is {data.dtype}"
            )
        raw = data.astype("<f4", copy=False).tobytes()
        shape = ",".join(str(n) for n in data.shape) or "1"
        lines.append(f"tensor {name} {shape} {offset} {data.size}")
        blobs.append(raw)
        offset += len(raw)
    lines.append("payload")

    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write("\n".join(lines).encode("utf-8") + b"\n")
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    header_end = raw.find(b"payload\n")
    if not raw.startswith(MAGIC.encode()) or header_end < 0:
        raise ConfigError(f"{path} is not an apecopy checkpoint")
    payload = raw[header_end + len(b"payload\n"):]

    meta: dict = {}
    config_kv: dict = {}
    entries = []
    for line in raw[:header_end].decode("utf-8").splitlines()[1:]:
        kind, rest = line.split(" ", 1)
        if kind.startswith("meta."):
            meta[kind[len("meta."):]] = rest
        elif kind.startswith("config."):
            config_kv[kind[len("config."):]] = rest
        elif kind == "tensor":
            name, shape, offset, numel = rest.rsplit(" ", 3)
            entries.append((name, shape, int(offset), int(numel)))

    config = _config_from_strings(config_kv)
    tensors = {}
    for name, shape, offset, numel in entries:
        block = payload[offset: offset + 4 * numel]
        arr = np.frombuffer(block, dtype="<f4").astype(np.float32)
        tensors[name] = arr.reshape(tuple(int(n) for n in shape.split(",")))
    return Checkpoint(meta=meta, config=config, tensors=tensors)


def _config_from_strings(kv: dict) -> ModelConfig:
    config = ModelConfig()
    for f in dataclasses.fields(ModelConfig):
        if f.name not in kv:
            continue
        text = kv[f.name]
        kind = type(getattr(config, f.name))
        value = text == "True" if kind is bool else kind(text)
        setattr(config, f.name, value)
    return config


def model_state(model) -> dict:
    return {name: t.data for name, t in model.parameter_items()}


def restore_model(ckpt: Checkpoint, model_cls):
    """Rebuild a model from its checkpointed config and parameters."""
    model = model_cls(ckpt.config, seed=int(ckpt.meta.get("seed", 0)))
    for name, tensor in model.parameter_items():
        if name not in ckpt.tensors:
            raise ConfigError(f"checkpoint is missing tensor {name!r}")
        stored = ckpt.tensors[name]
        if stored.shape != tensor.shape:
            raise ConfigError(
                f"checkpoint tensor {name!r} has shape {stored.shape}, expected {tensor.shape}"
            )
        tensor.data = stored.astype(tensor.dtype)
    return model
