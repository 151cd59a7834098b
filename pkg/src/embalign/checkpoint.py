"""Checkpoint persistence: a human-readable JSON manifest next to a raw
binary payload of little-endian float32 tensors.

A checkpoint is a pair of files sharing a stem: ``<stem>.manifest.json``
holds the format version, a config snapshot, and one entry per tensor
(name, shape, dtype, byte offset/length, trainable flag); ``<stem>.payload.bin``
is the concatenation of the tensors' raw bytes in entry order. Round trips
are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .adapter import AdapterConfig, AlignmentAdapter
from .autodiff import Parameter
from .encoder import Encoder, EncoderConfig, LoraConfig
from .errors import ConfigError, DataError
from .tasks import TaskHead

FORMAT_VERSION = 1


def digest_named(named_params, include=None) -> str:
    """SHA-256 over (name, raw bytes) of the given parameters, sorted by name."""
    h = hashlib.sha256()
    for name, p in sorted(named_params, key=lambda kv: kv[0]):
        if include is not None and not include(name):
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def weights_digest(module, include=None) -> str:
    """Digest of all of a module's parameters; ``include`` filters by name
    (used to hash e.g. only the base weights of a LoRA-augmented encoder)."""
    return digest_named(module.named_parameters(), include)


def _stem(path) -> Path:
    return Path(path)


def manifest_path(stem) -> Path:
    return _stem(stem).with_name(_stem(stem).name + ".manifest.json")


def payload_path(stem) -> Path:
    return _stem(stem).with_name(_stem(stem).name + ".payload.bin")


def checkpoint_exists(stem) -> bool:
    return manifest_path(stem).exists() and payload_path(stem).exists()


def write_checkpoint(stem, named_params, meta: dict) -> None:
    """Write (name, Parameter) pairs plus a metadata snapshot."""
    entries = []
    blobs = []
    offset = 0
    for name, p in named_params:
        arr = np.ascontiguousarray(p.data)
        if arr.dtype != np.float32:
            raise ConfigError(
                f"checkpoint tensors must be float32, {name} is {arr.dtype}"
            )
        raw = arr.astype("<f4", copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "float32",
            "byte_offset": offset,
            "byte_length": len(raw),
            "trainable": bool(p.trainable),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "meta": meta,
        "entries": entries,
    }
    manifest_path(stem).write_text(json.dumps(manifest, indent=1) + "\n")
    payload_path(stem).write_bytes(b"".join(blobs))


def read_checkpoint(stem):
    """Returns (meta, {name: Parameter}) with trainable flags restored."""
    mpath, ppath = manifest_path(stem), payload_path(stem)
    if not mpath.exists() or not ppath.exists():
        raise DataError(f"checkpoint not found at {stem}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format in {mpath}")
    payload = ppath.read_bytes()
    params: dict[str, Parameter] = {}
    expected_offset = 0
    for e in manifest["entries"]:
        off, length = e["byte_offset"], e["byte_length"]
        if off != expected_offset or off + length > len(payload):
            raise DataError(f"corrupt checkpoint entry {e['name']} in {mpath}")
        expected_offset = off + length
        arr = np.frombuffer(payload[off : off + length], dtype="<f4").reshape(e["shape"])
        params[e["name"]] = Parameter(arr.copy(), trainable=e["trainable"],
                                      name=e["name"])
    if expected_offset != len(payload):
        raise DataError(f"payload length mismatch in {ppath}")
    return manifest["meta"], params


def _apply_params(module, loaded: dict, prefix: str = "") -> None:
    for name, p in module.named_parameters():
        src = loaded.get(prefix + name)
        if src is None:
            raise DataError(f"checkpoint missing tensor {prefix + name}")
        if tuple(src.data.shape) != tuple(p.data.shape):
            raise ConfigError(
                f"tensor {prefix + name}: checkpoint shape {src.data.shape} "
                f"!= model shape {p.data.shape}"
            )
        p.data = src.data
        p.trainable = src.trainable


# ---------------------------------------------------------------------------
# Typed wrappers
# ---------------------------------------------------------------------------


def save_encoder(enc: Encoder, stem) -> None:
    meta = {"kind": "encoder", "config": asdict(enc.config)}
    if enc.lora_config is not None:
        meta["lora"] = {"rank": enc.lora_config.rank,
                        "alpha": enc.lora_config.alpha,
                        "targets": list(enc.lora_config.targets)}
    write_checkpoint(stem, enc.named_parameters(), meta)


def load_encoder(stem) -> Encoder:
    meta, params = read_checkpoint(stem)
    if meta.get("kind") != "encoder":
        raise DataError(f"{stem} is not an encoder checkpoint")
    enc = Encoder(EncoderConfig(**meta["config"]))
    if "lora" in meta:
        lc = meta["lora"]
        cfg = LoraConfig(rank=lc["rank"], alpha=lc["alpha"],
                         targets=tuple(lc["targets"]))
        enc.lora_config = cfg
        for i in range(enc.config.num_layers):
            for t in cfg.targets:
                a = params[f"layer{i}.lora_{t}.a"]
                b = params[f"layer{i}.lora_{t}.b"]
                enc.lora[(i, t)] = (a, b)
    _apply_params(enc, params)
    return enc


def save_adapter(adapter: AlignmentAdapter, stem) -> None:
    meta = {
        "kind": "adapter",
        "config": asdict(adapter.config),
        "linear_bypass": adapter.linear_bypass,
    }
    write_checkpoint(stem, adapter.named_parameters(), meta)


def load_adapter(stem) -> AlignmentAdapter:
    meta, params = read_checkpoint(stem)
    if meta.get("kind") != "adapter":
        raise DataError(f"{stem} is not an adapter checkpoint")
    adapter = AlignmentAdapter(AdapterConfig(**meta["config"]),
                               linear_bypass=meta["linear_bypass"])
    _apply_params(adapter, params)
    return adapter


def save_head(head: TaskHead, stem) -> None:
    meta = {
        "kind": "head",
        "head_kind": head.kind,
        "input_dim": head.input_dim,
        "num_classes": head.num_classes,
    }
    write_checkpoint(stem, head.named_parameters(), meta)


def load_head(stem) -> TaskHead:
    meta, params = read_checkpoint(stem)
    if meta.get("kind") != "head":
        raise DataError(f"{stem} is not a head checkpoint")
    head = TaskHead(meta["head_kind"], meta["input_dim"],
                    num_classes=meta["num_classes"])
    _apply_params(head, params)
    return head
