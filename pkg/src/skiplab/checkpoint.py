"""Binary checkpoint format.

Layout:

    bytes 0..3    magic "SKPT"
    bytes 4..7    u32 little-endian format version (currently 1)
    bytes 8..11   u32 little-endian header length
    bytes 12..    UTF-8 JSON header, then zero padding to a 64-byte
                  boundary where the payload section starts
    payload       little-endian float32 tensor data; every tensor's
                  offset (stored relative to the payload section, which
                  itself starts 64-byte aligned) is a multiple of 64

The header carries the model config snapshot, the router count, the
adapter table, and the named tensor table (name, shape, offset,
nbytes). Saving is deterministic, so save -> load -> save reproduces
the file byte for byte. Loading validates every tensor shape against
the embedded config and rejects version or config mismatches.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import Model, ModelConfig, apply_lora
from .routing import RouterState, init_routers
from .tensor import Tensor

MAGIC = b"SKPT"
VERSION = 1
ALIGN = 64
_PAYLOAD_DTYPE = np.dtype("<f4")


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _collect(model: Model, routers: list[RouterState] | None) -> dict[str, Tensor]:
    named = model.named_tensors()
    for i, r in enumerate(routers or []):
        named[f"router.{i}.w"] = r.w
    return named


def save_checkpoint(model: Model, routers: list[RouterState] | None, path) -> None:
    named = _collect(model, routers)
    table = []
    rel = 0
    for name, t in named.items():
        nbytes = t.data.size * _PAYLOAD_DTYPE.itemsize
        table.append({
            "name": name,
            "shape": list(t.data.shape),
            "offset": rel,
            "nbytes": nbytes,
        })
        rel = _align(rel + nbytes)
    lora_specs = []
    for module in model.modules:
        for key, ad in module.lora.items():
            lora_specs.append({"target": ad.target, "rank": ad.rank, "scale": ad.scale})
    header = {
        "config": model.config.to_dict(),
        "dtype": np.dtype(model.dtype).name,
        "routers": len(routers or []),
        "lora": lora_specs,
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    base = _align(12 + len(header_bytes))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(VERSION).tobytes())
        fh.write(np.uint32(len(header_bytes)).tobytes())
        fh.write(header_bytes)
        fh.write(b"\x00" * (base - 12 - len(header_bytes)))
        pos = 0
        for entry, t in zip(table, named.values()):
            fh.write(b"\x00" * (entry["offset"] - pos))
            payload = np.ascontiguousarray(t.data, dtype=_PAYLOAD_DTYPE).tobytes()
            fh.write(payload)
            pos = entry["offset"] + len(payload)


def load_checkpoint(path, expect_config: ModelConfig | None = None,
                    dtype=None, seed: int = 0) -> tuple[Model, list[RouterState]]:
    """Rebuild the model (and routers, possibly empty) from a checkpoint.

    `expect_config` rejects files whose embedded config differs;
    `dtype` overrides the recorded runtime dtype.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header_len = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    if 12 + header_len > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12: 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unparseable header ({exc})") from exc
    for key in ("config", "dtype", "routers", "lora", "tensors"):
        if key not in header:
            raise CheckpointError(f"{path}: header missing {key!r}")

    try:
        config = ModelConfig(**header["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid embedded config ({exc})") from exc
    if expect_config is not None and config.to_dict() != expect_config.to_dict():
        raise CheckpointError(
            f"{path}: checkpoint config {config.to_dict()} does not match expected {expect_config.to_dict()}"
        )
    n_routers = int(header["routers"])
    if n_routers not in (0, config.n_modules):
        raise CheckpointError(f"{path}: router count {n_routers} incompatible with 2L={config.n_modules}")

    run_dtype = np.dtype(dtype or header["dtype"]).type
    model = Model(config, dtype=run_dtype, seed=seed)
    for spec in header["lora"]:
        apply_lora(model, targets=[spec["target"]], rank=int(spec["rank"]),
                   scale=float(spec["scale"]), seed=seed)
    routers = init_routers(config, seed=seed, dtype=run_dtype) if n_routers else []

    named = _collect(model, routers)
    table = {entry["name"]: entry for entry in header["tensors"]}
    if set(table) != set(named):
        missing = sorted(set(named) - set(table))
        extra = sorted(set(table) - set(named))
        raise CheckpointError(f"{path}: tensor table mismatch (missing {missing}, unexpected {extra})")

    base = _align(12 + header_len)
    for name, t in named.items():
        entry = table[name]
        if list(t.data.shape) != list(entry["shape"]):
            raise CheckpointError(
                f"{path}: tensor {name} has shape {entry['shape']}, config implies {list(t.data.shape)}"
            )
        lo = base + int(entry["offset"])
        hi = lo + int(entry["nbytes"])
        if hi > len(raw):
            raise CheckpointError(f"{path}: truncated payload for tensor {name}")
        buf = np.frombuffer(raw[lo:hi], dtype=_PAYLOAD_DTYPE)
        if buf.size != t.data.size:
            raise CheckpointError(f"{path}: payload size mismatch for tensor {name}")
        t.data = buf.reshape(t.data.shape).astype(run_dtype)
    return model, routers
