"""Binary checkpoint format for the encoder and its adapters.

Layout (little-endian):

    bytes 0..3   magic b"SKCH"
    u32          format version
    u64          JSON header length H
    H bytes      UTF-8 JSON header
    rest         concatenated float32 tensor payloads, header order

The header carries the encoder config, the tokenizer vocabulary, the adapter
config (or null), and a tensor index of [name, shape] pairs. Tensors are the
base parameters in canonical order followed by adapter parameters. Round
trips are bitwise: float32 values are written and read back verbatim.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from pathlib import Path

import numpy as np

from sketchlab.encoder import EncoderConfig, EncoderModel
from sketchlab.errors import DimensionError, StateError, ValidationError
from sketchlab.lora import AdaptedModel, LoraConfig, inject
from sketchlab.tokenizer import Tokenizer

MAGIC = b"SKCH"
FORMAT_VERSION = 1


def _collect(model: EncoderModel | AdaptedModel):
    """Returns (base_model, lora_config_or_None, ordered parameter list)."""
    if isinstance(model, AdaptedModel):
        params = model.model.base_parameters() + model.adapter_parameters()
        return model.model, model.config, params
    if model.attached_adapters():
        raise StateError(
            "model has adapters attached but no adapter config; save the "
            "AdaptedModel wrapper instead"
        )
    return model, None, model.base_parameters()


def save(model: EncoderModel | AdaptedModel, path: str | Path) -> None:
    base, lora_cfg, params = _collect(model)
    header = {
        "format_version": FORMAT_VERSION,
        "encoder": dataclasses.asdict(base.config),
        "tokenizer": base.tokenizer.to_dict(),
        "lora": None if lora_cfg is None else {
            "targets": lora_cfg.targets,
            "rank": lora_cfg.rank,
            "alpha": lora_cfg.alpha,
            "projections": list(lora_cfg.projections),
        },
        "tensors": [[p.name, list(p.value.shape)] for p in params],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for p in params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def load(path: str | Path) -> EncoderModel | AdaptedModel:
    """Rebuilds the model from a checkpoint; adapters are re-attached if saved."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise ValidationError(f"{path} is not an encoder checkpoint (bad magic)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != FORMAT_VERSION:
        raise ValidationError(
            f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )
    header_len = struct.unpack("<Q", raw[8:16])[0]
    if 16 + header_len > len(raw):
        raise ValidationError(f"{path} is truncated (header extends past EOF)")
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"checkpoint header is not valid JSON: {exc}") from exc

    config = EncoderConfig(**header["encoder"])
    tokenizer = Tokenizer.from_dict(header["tokenizer"])
    model = EncoderModel(config, tokenizer, seed=0)
    result: EncoderModel | AdaptedModel = model
    if header["lora"] is not None:
        lc = header["lora"]
        lora_cfg = LoraConfig(targets=lc["targets"], rank=lc["rank"],
                              alpha=lc["alpha"],
                              projections=tuple(lc["projections"]))
        result = inject(model, lora_cfg, seed=0)
        by_name = {p.name: p for p in
                   model.base_parameters() + result.adapter_parameters()}
    else:
        by_name = {p.name: p for p in model.base_parameters()}

    offset = 16 + header_len
    for name, shape in header["tensors"]:
        shape = tuple(shape)
        param = by_name.get(name)
        if param is None:
            raise ValidationError(f"checkpoint tensor {name!r} has no home on the model")
        if param.value.shape != shape:
            raise DimensionError(
                f"checkpoint tensor {name!r} has shape {shape}, "
                f"model expects {param.value.shape}"
            )
        count = math.prod(shape)
        end = offset + 4 * count
        if end > len(raw):
            raise ValidationError(f"{path} is truncated inside tensor {name!r}")
        param.value[...] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape)
        offset = end
    if offset != len(raw):
        raise ValidationError(
            f"{path} has {len(raw) - offset} trailing bytes after the last tensor"
        )
    return result
