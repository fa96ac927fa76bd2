"""Named-array store used for checkpoints, datasets and embedding exports.

A store is two files sharing a stem: ``<stem>.bin`` holds the arrays back
to back as little-endian float64 in row-major order, ``<stem>.json`` is the
manifest::

    {"format": "uaspk-arrays/1",
     "arrays": [{"name": ..., "shape": [...], "offset": <float index>}, ...],
     "meta": {...}}

``offset`` counts float64 elements from the start of the binary file.
"""
import json
import os

import numpy as np
import torch

FORMAT = "uaspk-arrays/1"


def _stem(path):
    path = os.fspath(path)
    for ext in (".json", ".bin"):
        if path.endswith(ext):
            return path[: -len(ext)]
    return path


def save_arrays(path, arrays, meta=None):
    """Write ``{name: array}`` in insertion order plus a manifest."""
    stem = _stem(path)
    os.makedirs(os.path.dirname(stem) or ".", exist_ok=True)
    entries, offset = [], 0
    with open(stem + ".bin", "wb") as fh:
        for name, arr in arrays.items():
            if isinstance(arr, torch.Tensor):
                arr = arr.detach().cpu().numpy()
            # asarray, not ascontiguousarray: the latter promotes 0-d arrays to shape (1,)
            a = np.asarray(arr, dtype="<f8")
            fh.write(a.tobytes(order="C"))
            entries.append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.size
    with open(stem + ".json", "w") as fh:
        json.dump({"format": FORMAT, "arrays": entries, "meta": meta or {}}, fh, indent=1)
        fh.write("\n")
    return stem


def load_arrays(path):
    """Return ``(arrays, meta)`` with arrays as float64 numpy in manifest order."""
    stem = _stem(path)
    with open(stem + ".json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{stem}.json: unsupported format {manifest.get('format')!r}")
    flat = np.fromfile(stem + ".bin", dtype="<f8")
    arrays = {}
    for e in manifest["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + n > flat.size:
            raise ValueError(f"{stem}.bin truncated at array {e['name']!r}")
        arrays[e["name"]] = flat[e["offset"]: e["offset"] + n].reshape(tuple(e["shape"])).astype(np.float64)
    return arrays, manifest.get("meta", {})


def checkpoint_average(checkpoints):
    """Elementwise mean of parameter dicts with identical names and shapes."""
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ValueError("need at least one checkpoint to average")
    ref = checkpoints[0]
    for i, ck in enumerate(checkpoints[1:], 1):
        if list(ck) != list(ref):
            raise ValueError(f"checkpoint {i} has different parameter names")
        for name in ref:
            if np.shape(ck[name]) != np.shape(ref[name]):
                raise ValueError(
                    f"shape mismatch for {name!r}: {np.shape(ck[name])} vs {np.shape(ref[name])}")
    k = len(checkpoints)
    out = {}
    for name in ref:
        base = np.asarray(ref[name], dtype=np.float64)
        # anchored at the first checkpoint: identical inputs come back bit-exact
        delta = np.zeros_like(base)
        for ck in checkpoints[1:]:
            delta = delta + (np.asarray(ck[name], dtype=np.float64) - base)
        out[name] = base + delta / k
    return out
