"""Checkpoint format: a manifest.json describing the model plus a flat
params.bin holding every tensor as little-endian float64 in insertion
order. Saving is deterministic, so identical models produce bitwise
identical files; load -> save round trips are bit-exact."""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import ConfigError
from .model import Model, ModelSpec

MANIFEST_NAME = "manifest.json"
PARAMS_NAME = "params.bin"
FORMAT_VERSION = 1
DTYPE = "<f8"


def save_checkpoint(model: Model, out_dir, extra: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    tensors = []
    offset = 0
    blobs = []
    for name, arr in model.params.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        raw = arr.astype(DTYPE).tobytes()
        tensors.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)

    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": DTYPE,
        "spec": model.spec.to_jsonable(),
        "frozen": sorted(model.frozen),
        "tensors": tensors,
    }
    if extra:
        manifest["extra"] = extra

    with open(os.path.join(out_dir, PARAMS_NAME), "wb") as fh:
        for raw in blobs:
            fh.write(raw)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(ckpt_dir) -> Model:
    manifest_path = os.path.join(ckpt_dir, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise ConfigError(f"no {MANIFEST_NAME} in {ckpt_dir}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {manifest.get('format_version')}")
    if manifest.get("dtype") != DTYPE:
        raise ConfigError(f"unsupported checkpoint dtype {manifest.get('dtype')}")

    with open(os.path.join(ckpt_dir, PARAMS_NAME), "rb") as fh:
        raw = fh.read()

    params: dict[str, np.ndarray] = {}
    for t in manifest["tensors"]:
        chunk = raw[t["offset"] : t["offset"] + t["nbytes"]]
        want = int(np.prod(t["shape"])) * np.dtype(DTYPE).itemsize
        if len(chunk) != t["nbytes"] or t["nbytes"] != want:
            raise ConfigError(f"tensor {t['name']} has inconsistent size")
        arr = np.frombuffer(chunk, dtype=DTYPE).astype(np.float64).reshape(t["shape"])
        params[t["name"]] = arr.copy()

    return Model(
        spec=ModelSpec.from_jsonable(manifest["spec"]),
        params=params,
        frozen=set(manifest["frozen"]),
    )
