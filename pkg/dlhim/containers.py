"""
Containers - Self-describing binary records

Layout:
    8 bytes   magic b"DLHIMBIN"
    4 bytes   little-endian uint32 header length
    N bytes   UTF-8 JSON header (sorted keys)
    payloads  little-endian float64 arrays, in header["payloads"] order

The header lists every payload name and length, so a reader can detect
truncation before building anything from the file.
"""

import json
import struct
from typing import Dict, Tuple

import numpy as np

MAGIC = b"DLHIMBIN"
_LEN = struct.Struct("<I")


def write_container(path: str, header: Dict, payloads: Dict[str, np.ndarray]):
    """Write header + float64 payloads. Payload order follows insertion order."""
    header = dict(header)
    header["payloads"] = [[name, int(np.asarray(arr).size)] for name, arr in payloads.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_LEN.pack(len(blob)))
        f.write(blob)
        for arr in payloads.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_container(path: str) -> Tuple[Dict, Dict[str, np.ndarray]]:
    """Read a container; raises ValueError on any structural problem."""
    with open(path, "rb") as f:
        raw = f.read()

    if raw[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a DL-HIM container")
    offset = len(MAGIC)
    if len(raw) < offset + _LEN.size:
        raise ValueError(f"{path}: truncated header length")
    (hlen,) = _LEN.unpack_from(raw, offset)
    offset += _LEN.size
    if len(raw) < offset + hlen:
        raise ValueError(f"{path}: truncated header")
    try:
        header = json.loads(raw[offset:offset + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: corrupt header ({e})")
    offset += hlen

    payloads = {}
    for name, size in header.get("payloads", []):
        nbytes = 8 * size
        if len(raw) < offset + nbytes:
            raise ValueError(f"{path}: truncated payload '{name}'")
        payloads[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).astype(np.float64)
        offset += nbytes

    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, payloads
