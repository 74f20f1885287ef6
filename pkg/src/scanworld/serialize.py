"""Array blob format: little-endian arrays behind a JSON header.

Layout: 4-byte magic, uint32 header length, UTF-8 JSON header, raw data.
The header maps each array name to dtype ("f4" float32 / "i8" int64),
shape, and byte offset into the data section. Weights, optimizer state,
and streaming session snapshots all use this one container.
"""

from __future__ import annotations

import io
import json
import os

import numpy as np

MAGIC = b"SWB1"
_DTYPES = {"f4": np.dtype("<f4"), "i8": np.dtype("<i8")}


def blob_bytes(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    tensors = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.float32:
            code = "f4"
        elif arr.dtype in (np.int64, np.dtype("<i8")):
            code = "i8"
        else:
            raise TypeError(f"array {name!r} has unsupported dtype {arr.dtype}")
        data = arr.astype(_DTYPES[code]).tobytes()
        tensors[name] = {"dtype": code, "shape": list(arr.shape), "offset": offset}
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta or {}, "tensors": tensors},
                        sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(np.uint32(len(header)).newbyteorder("<").tobytes())
    out.write(header)
    for c in chunks:
        out.write(c)
    return out.getvalue()


def blob_from_bytes(raw: bytes):
    if raw[:4] != MAGIC:
        raise ValueError(f"bad magic {raw[:4]!r}; not a scanworld blob")
    hlen = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    base = 8 + hlen
    arrays = {}
    for name, spec in header["tensors"].items():
        dt = _DTYPES[spec["dtype"]]
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        start = base + spec["offset"]
        buf = np.frombuffer(raw, dtype=dt, count=n, offset=start)
        arrays[name] = buf.reshape(spec["shape"]).copy()
    return arrays, header["meta"]


def save_blob(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None):
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(blob_bytes(arrays, meta))
        os.replace(tmp, path)
    except OSError as e:
        raise OSError(f"failed writing blob to {path}: {e}") from e


def load_blob(path: str):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise OSError(f"failed reading blob from {path}: {e}") from e
    return blob_from_bytes(raw)


# --- checkpoints ---


def save_checkpoint(path: str, model, step: int = 0, optimizer_arrays=None,
                    extra_meta: dict | None = None):
    """Weights + config (+ optimizer state) in one blob."""
    arrays = {f"param/{k}": v for k, v in model.param_arrays().items()}
    if optimizer_arrays:
        arrays.update({f"opt/{k}": v for k, v in optimizer_arrays.items()})
    meta = {"kind": "checkpoint", "step": int(step),
            "config": json.loads(model.cfg.to_json())}
    if extra_meta:
        meta.update(extra_meta)
    save_blob(path, arrays, meta)


def load_checkpoint(path: str):
    """Returns (ModelConfig, param_arrays, optimizer_arrays, meta)."""
    from .net import ModelConfig
    arrays, meta = load_blob(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path} is not a checkpoint blob (kind={meta.get('kind')!r})")
    cfg = ModelConfig.from_dict(meta["config"])
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    opt = {k[len("opt/"):]: v for k, v in arrays.items() if k.startswith("opt/")}
    return cfg, params, opt or None, meta


def load_model(path: str):
    """Instantiate a Model from a checkpoint file."""
    from .net import Model
    cfg, params, _, meta = load_checkpoint(path)
    model = Model(cfg, seed=0)
    model.load_param_arrays(params)
    return model, meta
