"""Model file format.

Layout: the magic bytes ``ANYD1\\n``, an 8-byte little-endian manifest
length, a JSON manifest, then a little-endian float64 payload. The manifest
lists {name, shape, byte_offset} per parameter plus the model config and,
when present, a ``table_region`` entry flagging the contiguous byte span
holding the region-embedding table (always serialized last) so federation
can strip or audit it. Byte offsets are relative to the payload start.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .planner import ModelConfig, ModelParams, init_model

MAGIC = b"ANYD1\n"


class ModelFormatError(ValueError):
    """Raised when model bytes do not parse."""


def _manifest_and_payload(named: dict[str, np.ndarray], config: ModelConfig,
                          region_names: list[str],
                          table_names: list[str]) -> bytes:
    ordered = [n for n in named if n not in table_names] + \
        [n for n in table_names if n in named]
    entries = []
    chunks = []
    offset = 0
    table_start = None
    for name in ordered:
        arr = np.ascontiguousarray(named[name], dtype="<f8")
        if name in table_names and table_start is None:
            table_start = offset
        entries.append({"name": name, "shape": list(arr.shape),
                        "byte_offset": offset})
        blob = arr.tobytes()
        chunks.append(blob)
        offset += len(blob)
    manifest = {
        "format": "ANYD1",
        "config": config.to_dict(),
        "region_names": list(region_names),
        "params": entries,
    }
    if table_start is not None and any(n in named for n in table_names):
        manifest["table_region"] = {
            "params": [n for n in table_names if n in named],
            "byte_start": table_start,
            "byte_end": offset,
        }
    body = json.dumps(manifest, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(body)) + body + b"".join(chunks)


def model_to_bytes(model: ModelParams) -> bytes:
    named = {name: p.value for name, p in model.named_parameters().items()}
    return _manifest_and_payload(named, model.config,
                                 model.table.region_names,
                                 [model.table.embedding.name])


def shared_to_bytes(shared: dict[str, np.ndarray], config: ModelConfig) -> bytes:
    """Serialize a shared (table-free) parameter set, e.g. one federation
    message."""
    return _manifest_and_payload(dict(shared), config, [], [])


def parse_manifest(blob: bytes) -> tuple[dict, bytes]:
    if not blob.startswith(MAGIC):
        raise ModelFormatError("bad magic: not an ANYD1 file")
    header_end = len(MAGIC) + 8
    if len(blob) < header_end:
        raise ModelFormatError("truncated header")
    (length,) = struct.unpack("<Q", blob[len(MAGIC):header_end])
    manifest_bytes = blob[header_end:header_end + length]
    if len(manifest_bytes) != length:
        raise ModelFormatError("truncated manifest")
    try:
        manifest = json.loads(manifest_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"manifest is not valid JSON: {exc}") from exc
    return manifest, blob[header_end + length:]


def arrays_from_bytes(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    manifest, payload = parse_manifest(blob)
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["byte_offset"]
        stop = start + count * 8
        if stop > len(payload):
            raise ModelFormatError(
                f"payload truncated for parameter {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            payload[start:stop], dtype="<f8").astype(np.float64).reshape(shape)
    return manifest, arrays


def model_from_bytes(blob: bytes) -> ModelParams:
    manifest, arrays = arrays_from_bytes(blob)
    config = ModelConfig.from_dict(manifest["config"])
    region_names = manifest.get("region_names") or None
    model = init_model(config, seed=0, region_names=region_names)
    named = model.named_parameters()
    missing = set(named) - set(arrays)
    if missing:
        raise ModelFormatError(f"missing parameters: {sorted(missing)}")
    for name, p in named.items():
        arr = arrays[name]
        if arr.shape != p.value.shape:
            raise ModelFormatError(
                f"parameter {name!r} has shape {arr.shape}, "
                f"expected {p.value.shape}")
        p.value[...] = arr
        p.grad[...] = 0.0
    return model


def save_model(model: ModelParams, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> ModelParams:
    return model_from_bytes(Path(path).read_bytes())
