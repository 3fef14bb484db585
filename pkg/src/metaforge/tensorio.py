"""Model file helpers: JSON manifest at ``path`` plus ``path.bin`` holding the
named tensors as one flat little-endian float32 payload."""

from __future__ import annotations

import json
import math
import os

import numpy as np


def save_bundle(path: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    table = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    manifest = dict(meta)
    manifest["tensors"] = table
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, ensure_ascii=False, sort_keys=True)
    with open(path + ".bin", "wb") as f:
        for arr in tensors.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_bundle(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    bin_path = path + ".bin"
    if not os.path.exists(bin_path):
        raise FileNotFoundError(f"missing tensor payload {bin_path}")
    raw = np.fromfile(bin_path, dtype="<f4")
    tensors = {}
    for entry in manifest["tensors"]:
        size = math.prod(entry["shape"]) if entry["shape"] else 1
        chunk = raw[entry["offset"] : entry["offset"] + size]
        if chunk.size != size:
            raise ValueError(f"{bin_path}: truncated payload for {entry['name']}")
        tensors[entry["name"]] = chunk.reshape(entry["shape"]).astype(np.float64)
    return manifest, tensors
