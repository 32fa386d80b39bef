"""
Versioned little-endian binary container for checkpoints, projected Hessians
and utility gradients.

Layout:
    magic (4 bytes) | u32 version | u32 meta length | meta JSON (sorted keys)
    | u32 array count | per array: u8 dtype code, u8 ndim, u64 dims..., raw data
    | u64 CRC-64 (crcmod "crc-64") of everything before it
"""

import json
import os
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import crcmod.predefined
import numpy as np

from errors import StorageError

CHECKSUM_SIZE = 8
CRC64_NAME = "crc-64"

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {dt: code for code, dt in _DTYPES.items()}


def crc64() -> crcmod.Crc:
    """Fresh incremental CRC-64 (ISO 3309 polynomial, reflected, zero init)"""
    return crcmod.predefined.Crc(CRC64_NAME)


def pack_crc(crc: crcmod.Crc) -> bytes:
    return struct.pack("<Q", crc.crcValue)


def checksum64(data: bytes) -> bytes:
    crc = crc64()
    crc.update(data)
    return pack_crc(crc)


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def atomic_write(path: Union[str, Path], payload: bytes) -> None:
    """Write bytes to a sibling temp file, fsync, then rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def encode_container(magic: bytes, version: int, meta: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    meta = dict(meta)
    meta["arrays"] = list(arrays.keys())
    meta_bytes = canonical_json(meta)
    parts = [magic, struct.pack("<II", version, len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _CODES:
            raise ValueError(f"unsupported dtype {arr.dtype} for array '{name}'")
        parts.append(struct.pack("<BB", _CODES[dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    body = b"".join(parts)
    return body + checksum64(body)


def decode_container(payload: bytes, magic: bytes, source: str = "<bytes>") -> Tuple[int, Dict[str, Any], Dict[str, np.ndarray]]:
    if len(payload) < 16 + CHECKSUM_SIZE or payload[:4] != magic:
        raise StorageError(f"{source}: not a {magic.decode()} file")
    body, footer = payload[:-CHECKSUM_SIZE], payload[-CHECKSUM_SIZE:]
    if checksum64(body) != footer:
        raise StorageError(f"{source}: checksum mismatch")
    version, meta_len = struct.unpack_from("<II", body, 4)
    offset = 12
    meta = json.loads(body[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    (count,) = struct.unpack_from("<I", body, offset)
    offset += 4
    arrays = {}
    for name in meta.get("arrays", [])[:count]:
        code, ndim = struct.unpack_from("<BB", body, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}Q", body, offset)
        offset += 8 * ndim
        dtype = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(body, dtype=dtype, count=size // dtype.itemsize, offset=offset).reshape(shape).copy()
        offset += size
    return version, meta, arrays


def write_container(path: Union[str, Path], magic: bytes, meta: Dict[str, Any], arrays: Dict[str, np.ndarray], version: int = 1) -> None:
    try:
        atomic_write(path, encode_container(magic, version, meta, arrays))
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e


def read_container(path: Union[str, Path], magic: bytes) -> Tuple[int, Dict[str, Any], Dict[str, np.ndarray]]:
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    return decode_container(payload, magic, source=str(path))
