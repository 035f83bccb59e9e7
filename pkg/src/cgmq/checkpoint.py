"""Checkpoints as a JSON manifest plus one little-endian float32 blob.

``<stem>.json`` holds ``{"version", "tensors": {name: {shape, dtype, offset,
length}}, "meta"}`` where offsets and lengths count bytes into ``<stem>.bin``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .nn import Network, attach_quantizers, lenet5

VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save(path_stem, net: Network, meta: dict | None = None) -> Path:
    """Write ``net``'s parameters, ranges and gates; returns the manifest path."""
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    chunks = []
    offset = 0
    for name, arr in sorted(net.state_dict().items()):
        data = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        tensors[name] = {"shape": list(arr.shape), "dtype": "f32",
                         "offset": offset, "length": len(data)}
        chunks.append(data)
        offset += len(data)
    full_meta = {"quant": net.quant_meta() if net.is_quantized else None}
    full_meta.update(meta or {})
    manifest = {"version": VERSION, "tensors": tensors, "meta": full_meta}
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))
    manifest_path = stem.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


def read(path_stem) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, meta)`` without building a network."""
    stem = Path(path_stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    manifest_path = stem.with_suffix(".json")
    if not manifest_path.exists():
        raise CheckpointError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r}")
    blob = stem.with_suffix(".bin").read_bytes()
    tensors = {}
    for name, info in manifest["tensors"].items():
        if info["dtype"] != "f32":
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {info['dtype']!r}")
        end = info["offset"] + info["length"]
        if end > len(blob):
            raise CheckpointError(f"tensor {name!r} extends past the end of the blob")
        arr = np.frombuffer(blob, dtype=_DTYPE, count=info["length"] // 4, offset=info["offset"])
        tensors[name] = arr.reshape(info["shape"]).astype(np.float32)
    return tensors, manifest["meta"]


def network_from_meta(meta: dict) -> Network:
    net = lenet5()
    quant = meta.get("quant")
    if quant:
        quant = dict(quant)
        inp = quant.pop("input", None)
        granularity = "element" if any(q["gate_shape"] for q in quant.values()) else "layer"
        signed = {k: q["signed"] for k, q in quant.items()}
        attach_quantizers(net, granularity, signed=signed,
                          input_range=tuple(inp["range"]) if inp else None)
    return net


def load(path_stem) -> tuple[Network, dict]:
    tensors, meta = read(path_stem)
    net = network_from_meta(meta)
    net.load_state_dict(tensors)
    return net, meta
