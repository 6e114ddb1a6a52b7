"""Binary tensor format shared by checkpoints and datasets.

Tensor layout (little-endian): magic "VGT1", u32 rank, u32 extent per axis,
u8 dtype code (0 = float32, 1 = float64), then the raw scalars.

A tagged block prefixes a tensor with a u32 name length, the utf-8 name, and
a u64 payload length, so containers can be scanned or random-accessed.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

MAGIC = b"VGT1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(Exception):
    """Corrupt or unsupported serialized data."""


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODE_FOR:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        out.write(struct.pack("<I", extent))
    out.write(struct.pack("<B", _CODE_FOR[arr.dtype]))
    out.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return out.getvalue()


def write_tensor(f, arr: np.ndarray) -> None:
    f.write(tensor_bytes(arr))


def read_tensor(f) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    (rank,) = struct.unpack("<I", f.read(4))
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
    (code,) = struct.unpack("<B", f.read(1))
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape)) if shape else 1
    raw = f.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def write_block(f, name: str, arr: np.ndarray) -> None:
    payload = tensor_bytes(arr)
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<Q", len(payload)))
    f.write(payload)


def read_block(f) -> tuple[str, np.ndarray] | None:
    head = f.read(4)
    if not head:
        return None
    (name_len,) = struct.unpack("<I", head)
    name = f.read(name_len).decode("utf-8")
    (payload_len,) = struct.unpack("<Q", f.read(8))
    payload = f.read(payload_len)
    if len(payload) != payload_len:
        raise FormatError(f"truncated block {name!r}")
    return name, read_tensor(io.BytesIO(payload))


def read_all_blocks(f) -> dict[str, np.ndarray]:
    blocks: dict[str, np.ndarray] = {}
    while True:
        item = read_block(f)
        if item is None:
            return blocks
        blocks[item[0]] = item[1]


# ---------------------------------------------------------------------------
# Checkpoint container: canonical-JSON manifest + named tensor sections
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"VCKP"
CKPT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, manifest: dict, sections: dict[str, dict[str, np.ndarray]]) -> None:
    manifest = dict(manifest)
    manifest["sections"] = {
        sec: sorted(tensors.keys()) for sec, tensors in sections.items()
    }
    blob = canonical_json(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for sec in sorted(sections):
            for name in sorted(sections[sec]):
                write_block(f, f"{sec}/{name}", sections[sec][name])


def load_checkpoint(path) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        flat = read_all_blocks(f)
    sections: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in flat.items():
        sec, name = key.split("/", 1)
        sections.setdefault(sec, {})[name] = arr
    return manifest, sections
