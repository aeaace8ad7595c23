"""Checkpoint storage: a JSON manifest plus a raw little-endian fp32 blob.

Layout of a checkpoint directory::

    manifest.json   {"format": ..., "meta": {...}, "entries": [{"name", "shape", "dtype", "offset", "count"}]}
    tensors.bin     row-major little-endian float32 arrays, concatenated in manifest order
"""

import json
import os
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import torch

from mtnp.errors import FormatError

FORMAT = "mtnp-checkpoint/1"
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


def save_tensors(path, tensors: Dict[str, torch.Tensor], meta: dict) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.array(t.detach().cpu().numpy(), dtype="<f4", order="C")
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "float32",
            "offset": offset,
            "count": int(arr.size),
        })
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    manifest = {"format": FORMAT, "meta": meta, "entries": entries}
    tmp_blob = path / (BLOB + ".tmp")
    tmp_blob.write_bytes(b"".join(chunks))
    os.replace(tmp_blob, path / BLOB)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_tensors(path) -> Tuple[Dict[str, torch.Tensor], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"incomplete checkpoint at {path}: {exc.filename} missing") from exc
    if manifest.get("format") != FORMAT:
        raise FormatError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    tensors = {}
    for e in manifest["entries"]:
        end = e["offset"] + 4 * e["count"]
        if end > len(blob):
            raise FormatError(f"{path}: blob truncated at entry {e['name']!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=e["count"], offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(np.array(arr, dtype=np.float32).reshape(tuple(e["shape"])))
    return tensors, manifest["meta"]
