"""Checkpoint files: a list of named tensors.

Layout: ``b"EAGR"``, version u32, entry count u32, then per entry a u16 name
length, the UTF-8 name and one tensor in the ``EAGT`` format. All integers
little-endian.
"""

import io
import struct

from .errors import ContractError, ParseError
from .tensor import read_tensor, write_tensor

MAGIC = b"EAGR"
VERSION = 1


def dump_checkpoint(tensors):
    """Serialise a ``name -> Tensor`` mapping (in insertion order) to bytes."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContractError(f"tensor name too long: {name[:40]}...")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_tensor(t, buf)
    return buf.getvalue()


def parse_checkpoint(raw, requires_grad=True):
    fh = io.BytesIO(raw)
    if fh.read(4) != MAGIC:
        raise ParseError("not a checkpoint (bad magic)", 0)
    header = fh.read(8)
    if len(header) != 8:
        raise ParseError("truncated checkpoint header", 4 + len(header))
    version, count = struct.unpack("<II", header)
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    out = {}
    for _ in range(count):
        pos = fh.tell()
        head = fh.read(2)
        if len(head) != 2:
            raise ParseError("truncated entry name length", pos)
        (n,) = struct.unpack("<H", head)
        name_raw = fh.read(n)
        if len(name_raw) != n:
            raise ParseError("truncated entry name", pos + 2)
        try:
            name = name_raw.decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("entry name is not valid UTF-8", pos + 2) from None
        if name in out:
            raise ParseError(f"duplicate entry {name!r}", pos)
        out[name] = read_tensor(fh, requires_grad=requires_grad)
    if fh.read(1):
        raise ParseError("trailing bytes after last entry", fh.tell() - 1)
    return out


def save_checkpoint(tensors, path):
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(tensors))


def load_checkpoint(path, requires_grad=True):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), requires_grad=requires_grad)
