"""Model checkpoint (BVM1) and embedding (BVE1) files.

BVM1: ``b"BVM1" | version u16 | kind (u16 len + UTF-8) | config JSON
(u32 len + UTF-8) | tensor count u32 | per tensor: name (u16 len + UTF-8),
ndim u8, dims u32 * ndim`` followed by every tensor's float64 data,
little-endian, in table order.

BVE1: ``b"BVE1" | count u64`` then per record ``record index u64`` and 100
float64 values, little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import MalformedFile

CKPT_MAGIC = b"BVM1"
CKPT_VERSION = 1
EMB_MAGIC = b"BVE1"
EMBED_DIM = 100


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _str(s: str, fmt="<H") -> bytes:
    b = s.encode("utf-8")
    return struct.pack(fmt, len(b)) + b


def write_checkpoint(path, kind: str, config: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<H", CKPT_VERSION)
    out += _str(kind)
    out += _str(canonical_json(config), "<I")
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        out += _str(name)
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    for _, arr in tensors:
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


class _Cursor:
    def __init__(self, data: bytes, pos: int = 0):
        self.data, self.pos = data, pos

    def unpack(self, fmt: str):
        try:
            vals = struct.unpack_from(fmt, self.data, self.pos)
        except struct.error as exc:
            raise MalformedFile(str(exc)) from exc
        self.pos += struct.calcsize(fmt)
        return vals

    def string(self, fmt="<H") -> str:
        (n,) = self.unpack(fmt)
        b = self.data[self.pos : self.pos + n]
        if len(b) != n:
            raise MalformedFile("truncated string")
        self.pos += n
        return b.decode("utf-8")


def read_checkpoint_header(data: bytes) -> dict:
    if data[:4] != CKPT_MAGIC:
        raise MalformedFile("not a BVM1 checkpoint")
    c = _Cursor(data, 4)
    (version,) = c.unpack("<H")
    kind = c.string()
    config = json.loads(c.string("<I"))
    (count,) = c.unpack("<I")
    table = []
    for _ in range(count):
        name = c.string()
        (ndim,) = c.unpack("<B")
        shape = c.unpack(f"<{ndim}I") if ndim else ()
        table.append((name, tuple(shape)))
    return {"magic": "BVM1", "version": version, "kind": kind, "config": config, "tensors": table, "_pos": c.pos}


def read_checkpoint(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    head = read_checkpoint_header(data)
    pos = head["_pos"]
    tensors = {}
    for name, shape in head["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = data[pos : pos + 8 * n]
        if len(chunk) != 8 * n:
            raise MalformedFile(f"truncated tensor {name}")
        tensors[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        pos += 8 * n
    return head["kind"], head["config"], tensors


def write_embeddings(path, indices, vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype=np.float64)
    indices = np.asarray(indices, dtype=np.uint64)
    if vectors.ndim != 2 or vectors.shape[1] != EMBED_DIM or len(indices) != len(vectors):
        raise ValueError(f"expected ({len(indices)}, {EMBED_DIM}) embeddings, got {vectors.shape}")
    rec = np.empty(len(indices), dtype=[("index", "<u8"), ("vec", "<f8", (EMBED_DIM,))])
    rec["index"] = indices
    rec["vec"] = vectors
    Path(path).write_bytes(EMB_MAGIC + struct.pack("<Q", len(indices)) + rec.tobytes())


def read_embeddings_header(data: bytes) -> dict:
    if data[:4] != EMB_MAGIC:
        raise MalformedFile("not a BVE1 embedding file")
    (count,) = _Cursor(data, 4).unpack("<Q")
    return {"magic": "BVE1", "count": count}


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    count = read_embeddings_header(data)["count"]
    dt = np.dtype([("index", "<u8"), ("vec", "<f8", (EMBED_DIM,))])
    body = data[12:]
    if len(body) != count * dt.itemsize:
        raise MalformedFile("BVE1 body length does not match record count")
    rec = np.frombuffer(body, dtype=dt)
    return rec["index"].astype(np.int64), rec["vec"].astype(np.float64)


def sniff(path) -> dict:
    """Header summary of any BVD1/BVM1/BVE1 file."""
    from .dataset import read_header

    data = Path(path).read_bytes()
    magic = data[:4]
    if magic == b"BVD1":
        head = read_header(data)
        return {k: v for k, v in head.items() if not k.startswith("_")} | {"composer_count": len(head["composers"])}
    if magic == CKPT_MAGIC:
        head = read_checkpoint_header(data)
        n_params = sum(int(np.prod(s)) if s else 1 for _, s in head["tensors"])
        return {
            "magic": "BVM1",
            "version": head["version"],
            "kind": head["kind"],
            "tensor_count": len(head["tensors"]),
            "value_count": n_params,
            "config": head["config"],
        }
    if magic == EMB_MAGIC:
        return read_embeddings_header(data) | {"dim": EMBED_DIM}
    raise MalformedFile(f"unrecognised magic {magic!r}")
