"""Binary serialization for named array collections and model bundles.

File layout (all integers little-endian):

    bytes 0..8    magic ``LWCK0001``
    bytes 8..16   u64 byte length of the JSON manifest
    manifest      UTF-8 JSON: {"arrays": [...], "meta": {...}}
    payload       raw C-order array bytes, concatenated

Each manifest entry records name, dtype string, shape, and byte offset
into the payload. Arrays are written in sorted-name order with compact,
key-sorted JSON, so saving the same state twice yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autograd import Parameter
from .encoder import ModelConfig, TransformerEncoder
from .exits import ExitHead, Wiring, head_parameters

MAGIC = b"LWCK0001"


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays, meta=None):
    """Write a {name: ndarray} mapping plus a JSON-safe meta dict."""
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        # asarray first: ascontiguousarray would promote 0-d scalars to 1-d
        arr = np.asarray(arrays[name])
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        arr = arr.astype(dtype, copy=False)
        entries.append(
            {
                "name": name,
                "dtype": dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
            }
        )
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"arrays": entries, "meta": meta if meta is not None else {}}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode(
        "utf-8"
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def load_arrays(path):
    """Read back (arrays, meta); arrays are fresh writable copies."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (blob_len,) = struct.unpack_from("<Q", raw, 8)
    manifest_end = 16 + blob_len
    if manifest_end > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16:manifest_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad manifest ({exc})") from None
    payload = memoryview(raw)[manifest_end:]
    arrays = {}
    for entry in manifest["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = entry["offset"] + count * dtype.itemsize
        if end > len(payload):
            raise CheckpointError(
                f"{path}: array {entry['name']!r} overruns payload"
            )
        flat = np.frombuffer(
            payload, dtype=dtype, count=count, offset=entry["offset"]
        )
        arrays[entry["name"]] = flat.reshape(shape).copy()
    return arrays, manifest.get("meta", {})


def _wiring_meta(wiring):
    if wiring.is_flat:
        return {"scheme": wiring.scheme, "flat_layer": wiring.flat_layer}
    return {
        "scheme": wiring.scheme,
        "assignments": [list(layers) for layers in wiring.assignments],
    }


def _wiring_from_meta(meta, num_layers):
    if "flat_layer" in meta:
        wiring = Wiring(scheme=meta["scheme"], flat_layer=int(meta["flat_layer"]))
        return wiring.validate(num_layers, 0)
    assignments = tuple(
        tuple(int(x) for x in layers) for layers in meta["assignments"]
    )
    wiring = Wiring(scheme=meta["scheme"], assignments=assignments)
    return wiring.validate(num_layers, len(assignments))


def save_model(path, encoder, heads, wiring, extra=None):
    """Bundle encoder + head parameters with enough meta to rebuild them."""
    arrays = {p.name: p.value for p in encoder.parameters()}
    for p in head_parameters(heads):
        if p.name in arrays:
            raise CheckpointError(f"duplicate parameter name {p.name!r}")
        arrays[p.name] = p.value
    meta = {
        "kind": "model",
        "config": encoder.config.to_dict(),
        "wiring": _wiring_meta(wiring),
    }
    if extra:
        meta["extra"] = dict(extra)
    save_arrays(path, arrays, meta)


def load_model(path):
    """Rebuild (encoder, heads, wiring, extra) from a model bundle."""
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model bundle")
    config = ModelConfig.from_dict(meta["config"])
    wiring = _wiring_from_meta(meta["wiring"], config.num_layers)
    encoder = TransformerEncoder(config)
    for p in encoder.parameters():
        stored = arrays.pop(p.name, None)
        if stored is None:
            raise CheckpointError(f"{path}: missing array {p.name!r}")
        if stored.shape != p.shape:
            raise CheckpointError(
                f"{path}: {p.name!r} has shape {stored.shape}, "
                f"model needs {p.shape}"
            )
        p.value[...] = stored
    heads = []
    if wiring.is_flat:
        levels = [0]
    else:
        levels = list(range(1, wiring.depth + 1))
    for n in levels:
        stem = "head.flat" if n == 0 else f"head.level{n}"
        try:
            weight = arrays.pop(f"{stem}.weight")
            bias = arrays.pop(f"{stem}.bias")
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing array {exc}") from None
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise CheckpointError(f"{path}: malformed head arrays for {stem}")
        heads.append(
            ExitHead(
                level=n,
                weight=Parameter(f"{stem}.weight", weight),
                bias=Parameter(f"{stem}.bias", bias),
            )
        )
    if arrays:
        unexpected = ", ".join(sorted(arrays))
        raise CheckpointError(f"{path}: unexpected arrays: {unexpected}")
    return encoder, heads, wiring, meta.get("extra", {})
