"""
The FTZ tensor container.

    magic "FTEN" | u32 version | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 rank | rank x u32 dims | u8 dtype | payload

All integers and payloads are little-endian. Entries are written in the order given and
read back in file order, so a dump/load round-trip is bit-exact.
"""
import struct
from collections import OrderedDict

import numpy as np

from .errors import CheckpointError


MAGIC = b"FTEN"
VERSION = 1

DT_FLOAT32 = 0

DTYPE_CODES = {
    DT_FLOAT32: np.dtype("<f4"),
}


def dtype_code(dtype):
    """
    Return the FTZ code for a numpy dtype. Floating arrays of other widths are stored as
    float32.
    """
    dtype = np.dtype(dtype)
    for code, candidate in DTYPE_CODES.items():
        if dtype.kind == candidate.kind:
            return code
    raise ValueError("No FTZ dtype for %s" % dtype)


def dumps(tensors):
    """
    Serialise an ordered mapping of name -> numpy array.
    """
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = dtype_code(arr.dtype)
        encoded = name.encode("utf8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack("<%dI" % arr.ndim, *arr.shape))
        chunks.append(struct.pack("<B", code))
        chunks.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(chunks)


def loads(blob, path="<bytes>"):
    view = memoryview(blob)
    offset = 0

    def take(n):
        nonlocal offset
        if offset + n > len(view):
            raise CheckpointError(path, "truncated at byte %d" % offset)
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(path, "bad magic, not an FTZ file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(path, "unsupported FTZ version %d" % version)
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack("<%dI" % rank, take(4 * rank))
        (code,) = struct.unpack("<B", take(1))
        try:
            dtype = DTYPE_CODES[code]
        except KeyError:
            raise CheckpointError(path, "entry %r has unknown dtype code %d" % (name, code))
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(bytes(take(n_bytes)), dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    if offset != len(view):
        raise CheckpointError(path, "%d trailing bytes" % (len(view) - offset))
    return tensors


def dump(tensors, path):
    with open(path, "wb") as f:
        f.write(dumps(tensors))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read(), path=str(path))
