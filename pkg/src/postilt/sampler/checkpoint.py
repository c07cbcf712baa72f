"""Generator checkpoints: JSON descriptor next to a little-endian f32 blob."""

import json
from pathlib import Path

import numpy as np

from ..errors import DataError
from .generator import Architecture, GeneratorParams, param_shapes

FORMAT = "postilt-generator/1"


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix == ".json":
        return path, path.with_suffix(".bin")
    return path.with_suffix(".json"), path.with_suffix(".bin")


def save_checkpoint(path, params: GeneratorParams, extra: dict | None = None) -> Path:
    """Write ``<stem>.json`` and ``<stem>.bin``; returns the JSON path."""
    meta_path, blob_path = _paths(path)
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    manifest, offset, chunks = [], 0, []
    for name in params.names():
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    blob_path.write_bytes(b"".join(chunks))
    meta = {
        "format": FORMAT,
        "arch": params.arch.to_dict(),
        "blob": blob_path.name,
        "nbytes": offset,
        "manifest": manifest,
        "extra": extra or {},
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta_path


def load_checkpoint(path, dtype=np.float32) -> tuple[GeneratorParams, dict]:
    """Returns (params, extra)."""
    meta_path, _ = _paths(path)
    if not meta_path.exists():
        raise DataError(f"checkpoint not found: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{meta_path}: malformed checkpoint descriptor ({exc})") from None
    if meta.get("format") != FORMAT:
        raise DataError(f"{meta_path}: unsupported checkpoint format {meta.get('format')!r}")
    blob_path = meta_path.parent / meta["blob"]
    if not blob_path.exists():
        raise DataError(f"checkpoint blob not found: {blob_path}")
    blob = blob_path.read_bytes()
    if len(blob) != meta["nbytes"]:
        raise DataError(f"{blob_path}: expected {meta['nbytes']} bytes, found {len(blob)}")
    arch = Architecture.from_dict(meta["arch"])
    expected = param_shapes(arch)
    tensors = {}
    for entry in meta["manifest"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        if expected.get(name) != shape:
            raise DataError(f"{meta_path}: tensor {name} has shape {shape}, architecture expects {expected.get(name)}")
        count = int(np.prod(shape))
        if off < 0 or off + 4 * count > len(blob):
            raise DataError(f"{meta_path}: tensor {name} runs past the end of the blob")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).astype(dtype)
    missing = set(expected) - set(tensors)
    if missing:
        raise DataError(f"{meta_path}: missing tensors {sorted(missing)[:3]}")
    params = GeneratorParams(arch, tensors)
    if not params.all_finite():
        raise DataError(f"{meta_path}: non-finite parameter values")
    return params, meta.get("extra", {})
