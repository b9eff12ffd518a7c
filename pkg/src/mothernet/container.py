"""Self-describing binary tensor container.

Layout (little-endian)::

    magic      5 bytes, e.g. b"MNCK1"
    header_len u32
    header     UTF-8 JSON, keys sorted; holds ``meta`` and a tensor table
    payload    f32 tensors, concatenated in table order, C order

Writing is deterministic, so export -> import -> export is byte-identical.
"""

import json
import struct

import numpy as np

from .errors import FormatError

_U32 = struct.Struct("<I")


def write_container(magic, meta, tensors):
    """Serialize ``tensors`` (an ordered mapping of name -> array) and ``meta``."""
    if len(magic) != 5:
        raise ValueError("magic must be 5 bytes")
    table = []
    chunks = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        table.append({"name": name, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    header = json.dumps({"meta": meta, "tensors": table}, sort_keys=True).encode("utf-8")
    return b"".join([magic, _U32.pack(len(header)), header, *chunks])


def read_container(data, magic):
    """Parse bytes from :func:`write_container`; returns ``(meta, tensors)``."""
    data = bytes(data)
    if len(data) < 5:
        raise FormatError("truncated magic", offset=len(data))
    if data[:5] != magic:
        raise FormatError(f"bad magic {data[:5]!r}, expected {magic!r}", offset=0)
    if len(data) < 9:
        raise FormatError("truncated header length", offset=len(data))
    (hlen,) = _U32.unpack_from(data, 5)
    end = 9 + hlen
    if len(data) < end:
        raise FormatError("truncated header", offset=len(data))
    try:
        header = json.loads(data[9:end].decode("utf-8"))
        meta = header["meta"]
        table = header["tensors"]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"malformed header: {exc}", offset=9) from exc
    tensors = {}
    pos = end
    for entry in table:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise FormatError(f"truncated tensor {entry['name']!r}", offset=len(data))
        tensors[entry["name"]] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(data):
        raise FormatError("trailing bytes after payload", offset=pos)
    return meta, tensors
