"""Flat binary checkpoints: a text manifest line, then raw float32 entries.

Layout: ``SARNAS-CKPT v1 <entry-count>\\n`` followed, per entry, by a text
line ``<name> <rank> <dim0> <dim1> ...\\n`` and the row-major
little-endian float32 payload.  Loading into parameters verifies names
and shapes exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import CheckpointError, ParseError

CKPT_MAGIC = "SARNAS-CKPT v1"


def save_checkpoint(path, entries):
    """entries: ordered (name, array) pairs; values stored as float32."""
    for name, _ in entries:
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"entry name {name!r} contains whitespace")
    with open(path, "wb") as fh:
        fh.write(f"{CKPT_MAGIC} {len(entries)}\n".encode("ascii"))
        for name, arr in entries:
            arr = np.asarray(arr)
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"{name} {arr.ndim}{' ' + dims if dims else ''}\n".encode("ascii"))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_line(blob, pos):
    end = blob.find(b"\n", pos)
    if end < 0:
        raise ParseError("unterminated header line", offset=pos)
    return blob[pos:end].decode("ascii"), end + 1


def load_checkpoint(path):
    """Returns an ordered dict of name -> float32 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header, pos = _read_line(blob, 0)
    parts = header.rsplit(" ", 1)
    if len(parts) != 2 or parts[0] != CKPT_MAGIC:
        raise ParseError(f"bad checkpoint header {header!r}", offset=0)
    try:
        count = int(parts[1])
    except ValueError:
        raise ParseError(f"bad entry count {parts[1]!r}", offset=0) from None
    entries = {}
    for _ in range(count):
        line, pos = _read_line(blob, pos)
        fields = line.split(" ")
        if len(fields) < 2:
            raise ParseError(f"bad entry line {line!r}", offset=pos)
        name = fields[0]
        try:
            rank = int(fields[1])
            dims = tuple(int(v) for v in fields[2:])
        except ValueError:
            raise ParseError(f"bad entry line {line!r}", offset=pos) from None
        if len(dims) != rank:
            raise ParseError(
                f"entry {name!r} declares rank {rank} but {len(dims)} dims",
                offset=pos,
            )
        nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if dims else 4
        if pos + nbytes > len(blob):
            raise ParseError(f"entry {name!r} payload truncated", offset=pos)
        arr = np.frombuffer(blob[pos : pos + nbytes], dtype="<f4").reshape(dims)
        if name in entries:
            raise ParseError(f"duplicate entry name {name!r}", offset=pos)
        entries[name] = arr.copy()
        pos += nbytes
    if pos != len(blob):
        raise ParseError(f"{len(blob) - pos} trailing bytes after last entry", offset=pos)
    return entries


def save_params(path, params):
    save_checkpoint(path, [(p.name, p.data) for p in params])


def load_into_params(path, params):
    """Restore parameter values, demanding exact name and shape agreement."""
    entries = load_checkpoint(path)
    names = [p.name for p in params]
    missing = [n for n in names if n not in entries]
    if missing:
        raise CheckpointError(f"checkpoint is missing tensor {missing[0]!r}")
    extra = [n for n in entries if n not in set(names)]
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]!r}")
    for p in params:
        arr = entries[p.name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"tensor {p.name!r} has shape {arr.shape} in checkpoint, "
                f"network expects {p.data.shape}"
            )
    for p in params:
        p.tensor.data[...] = entries[p.name].astype(p.data.dtype)
