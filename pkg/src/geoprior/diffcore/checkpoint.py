"""Parameter checkpoint container.

A checkpoint is a numpy ``.npz`` archive: one array per parameter id (the
array's own shape and dtype make it self-describing) plus a reserved
``__meta__`` entry holding a JSON string with a format version and any
caller-supplied metadata.
"""
from __future__ import annotations

import json

import numpy as np

FORMAT_VERSION = 1
META_KEY = "__meta__"


def save_checkpoint(path, arrays, meta=None):
    payload = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    if META_KEY in payload:
        raise KeyError(f"{META_KEY} is reserved")
    info = {"format": "geoprior-params", "version": FORMAT_VERSION, **(meta or {})}
    payload[META_KEY] = np.array(json.dumps(info, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z[META_KEY])) if META_KEY in z.files else {}
        arrays = {k: z[k].astype(np.float64) for k in z.files if k != META_KEY}
    return arrays, meta


def save_store(path, store, meta=None):
    save_checkpoint(path, {k: v.data for k, v in store.items()}, meta)


def load_store(path, store, strict=True):
    arrays, meta = load_checkpoint(path)
    store.load(arrays, strict=strict)
    return meta
