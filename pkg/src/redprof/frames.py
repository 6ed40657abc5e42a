"""Frame keys: the value types that identify calling-context tree nodes.

Equality is structural. stable_key_hash is deterministic across processes
and platforms (unlike builtin hash on strings), so any structure ordered by
it renders identically everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from hashlib import blake2b
from typing import Union


@dataclass(frozen=True, slots=True)
class NativeFrame:
    symbol: str
    module: str
    ip: int


@dataclass(frozen=True, slots=True)
class PyFrame:
    function: str
    file: str
    line: int


@dataclass(frozen=True, slots=True)
class AccessLeaf:
    ip: int
    kind: str


FrameKey = Union[NativeFrame, PyFrame, AccessLeaf]

_hash_memo: dict[FrameKey, int] = {}


def stable_key_hash(key: FrameKey) -> int:
    """Deterministic 64-bit hash of a frame key."""
    h = _hash_memo.get(key)
    if h is not None:
        return h
    t = type(key)
    if t is NativeFrame:
        raw = (b"N\x00" + key.symbol.encode() + b"\x00" + key.module.encode()
               + b"\x00" + key.ip.to_bytes(8, "little"))
    elif t is PyFrame:
        raw = (b"P\x00" + key.function.encode() + b"\x00" + key.file.encode()
               + b"\x00" + key.line.to_bytes(4, "little"))
    else:
        raw = b"A\x00" + key.kind.encode() + b"\x00" + key.ip.to_bytes(8, "little")
    h = int.from_bytes(blake2b(raw, digest_size=8).digest(), "little")
    _hash_memo[key] = h
    return h
