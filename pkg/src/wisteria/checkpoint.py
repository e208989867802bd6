"""Binary checkpoint container and model/training-state serialization.

Layout (all integers little-endian):

    magic    4 bytes   b"WSTR"
    version  u32       currently 1
    blob_len u64       UTF-8 canonical config text
    blob     blob_len bytes
    count    u64       number of tensors
    per tensor:
        name_len u16, name UTF-8
        dtype    u8   (0 = f32, 1 = f64)
        rank     u8
        dims     rank x u64
        payload  prod(dims) x itemsize, raw little-endian

Model checkpoints store parameters as f32 (loads promote to f64, so a save
and load round-trips bit-exactly modulo the one f32 quantization). Training
states store f64 parameters plus optimizer moments so a resumed run
continues bit-exactly.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from . import config as C
from .errors import CheckpointError
from .model import Model, build_model

MAGIC = b"WSTR"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    offset = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(
            f"truncated checkpoint: wanted {n} bytes for {what} at offset {offset}, got {len(buf)}"
        )
    return buf


def write_container(path: str, blob: str, tensors) -> None:
    """tensors: iterable of (name, ndarray[float32|float64])."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        raw = blob.encode("utf-8")
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        items = list(tensors)
        fh.write(struct.pack("<Q", len(items)))
        for name, arr in items:
            arr = np.ascontiguousarray(arr)
            code = _DTYPE_CODES[arr.dtype]
            nm = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nm)))
            fh.write(nm)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_header(fh: BinaryIO) -> str:
    magic = _read_exact(fh, 4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    (blob_len,) = struct.unpack("<Q", _read_exact(fh, 8, "config length"))
    return _read_exact(fh, blob_len, "config blob").decode("utf-8")


def _read_tensor_meta(fh: BinaryIO):
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
    name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
    code, rank = struct.unpack("<BB", _read_exact(fh, 2, "tensor dtype/rank"))
    if code not in _DTYPES:
        raise CheckpointError(f"unknown dtype code {code} for tensor {name!r} at offset {fh.tell() - 2}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, f"dims of {name!r}"))
    return name, _DTYPES[code], shape


def read_container(path: str):
    """Returns (blob, dict name -> ndarray) with payloads as stored dtypes."""
    with open(path, "rb") as fh:
        blob = _read_header(fh)
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "tensor count"))
        tensors = {}
        for _ in range(count):
            name, dtype, shape = _read_tensor_meta(fh)
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
            n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(fh, n_items * dtype.itemsize, f"payload of {name!r}")
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        return blob, tensors


def iter_tensor_table(path: str):
    """Yield (name, dtype_str, shape, nbytes) without holding payloads.

    Streams the table one tensor at a time; payloads are seek()ed past, so
    memory stays bounded by a single tensor's metadata.
    """
    with open(path, "rb") as fh:
        blob = _read_header(fh)
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "tensor count"))
        metas = []
        for _ in range(count):
            name, dtype, shape = _read_tensor_meta(fh)
            n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
            nbytes = n_items * dtype.itemsize
            end = fh.seek(nbytes, 1)
            metas.append((name, dtype.name, shape, nbytes))
            # verify the payload is actually present
            fh.seek(end - 1)
            if fh.read(1) == b"" and nbytes > 0:
                raise CheckpointError(f"truncated payload of {name!r} near offset {end}")
        return blob, metas


# ---------------------------------------------------------------------------
# model checkpoints (f32 payloads)


def save_model(model: Model, path: str) -> None:
    blob = C.canonical_text(C.model_config_dict(model.cfg))
    write_container(path, blob, ((name, t.data.astype(np.float32)) for name, t in model.params()))


def load_model(path: str) -> Model:
    blob, tensors = read_container(path)
    cfg = C.model_config(C.from_canonical_text(blob))
    model = build_model(cfg)
    _assign_params(model, tensors, path)
    return model


def _assign_params(model: Model, tensors: dict, path: str, prefix: str = "") -> None:
    seen = set()
    for name, t in model.params():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"checkpoint {path} is missing tensor {key!r}")
        arr = tensors[key]
        if tuple(arr.shape) != t.data.shape:
            raise CheckpointError(
                f"tensor {key!r}: stored shape {tuple(arr.shape)} != model shape {t.data.shape}"
            )
        t.data[...] = arr.astype(np.float64)
        seen.add(key)
    extras = [k for k in tensors if k.startswith(prefix) and k not in seen]
    if prefix == "" and extras:
        raise CheckpointError(f"checkpoint {path} has unexpected tensors: {sorted(extras)[:4]}")


# ---------------------------------------------------------------------------
# training state (f64 payloads: params + AdamW moments + step)


def save_training_state(path: str, model: Model, moments_m: dict, moments_v: dict,
                        step: int, run_cfg: dict | None = None) -> None:
    cfg_d = dict(run_cfg) if run_cfg else C.model_config_dict(model.cfg)
    cfg_d["state.step"] = int(step)
    blob = C.canonical_text(cfg_d)

    def tensors():
        for name, t in model.params():
            yield f"param/{name}", t.data
        for name in moments_m:
            yield f"m/{name}", moments_m[name]
        for name in moments_v:
            yield f"v/{name}", moments_v[name]

    write_container(path, blob, tensors())


def load_training_state(path: str):
    """Returns (model, moments_m, moments_v, step, run_cfg_dict)."""
    blob, tensors = read_container(path)
    raw_cfg = C.from_canonical_text(blob)
    step = int(raw_cfg.pop("state.step", 0))
    cfg = C.model_config(raw_cfg)
    model = build_model(cfg)
    _assign_params(model, {k[len("param/"):]: v for k, v in tensors.items()
                           if k.startswith("param/")}, path)
    mm, mv = {}, {}
    for name, _ in model.params():
        for table, store in (("m/", mm), ("v/", mv)):
            key = table + name
            if key not in tensors:
                raise CheckpointError(f"training state {path} is missing tensor {key!r}")
            store[name] = tensors[key].astype(np.float64)
    return model, mm, mv, step, raw_cfg


def inspect_checkpoint(path: str, out=print) -> None:
    blob, metas = iter_tensor_table(path)
    out(f"checkpoint {path}")
    out(f"format WSTR v{VERSION}; {len(metas)} tensors")
    out("-- config --")
    for line in blob.strip().splitlines():
        out(f"  {line}")
    out("-- tensors --")
    total = 0
    for name, dtype, shape, nbytes in metas:
        total += nbytes
        out(f"  {name}  {dtype}{list(shape)}  {nbytes} bytes")
    out(f"total payload {total} bytes")
