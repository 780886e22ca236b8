"""Control-channel messages carried over the pinned per-QP control region.

Layout (little-endian), 64-byte header::

    kind u8 | opcode u8 | flags u16 | tag u64 | initiator_key u32 |
    initiator_offset u64 | target_key u32 | target_offset u64 |
    length u64 | imm u32 | reserved 16 bytes

Any payload follows in 64-byte slots, zero padded.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

HEADER = struct.Struct("<BBHQIQIQQI16s")
HEADER_SIZE = 64
SLOT = 64
KEYMAP_ENTRY = struct.Struct("<IIII")

assert HEADER.size == HEADER_SIZE


class MsgKind(enum.IntEnum):
    REQUEST = 1
    COMPLETION = 2
    INLINE_WRITE_DATA = 3
    INLINE_READ_DATA = 4
    KEYMAP_SYNC = 5
    RECEIVER_READY = 6
    ATOMIC_REQUEST = 7
    ATOMIC_REPLY = 8


class WireOp(enum.IntEnum):
    NONE = 0
    READ = 1
    WRITE = 2
    SEND = 3
    CAS = 4
    FAA = 5
    WRITE_IMM = 6


class Flag(enum.IntFlag):
    NONE = 0
    ERROR = 0x1
    HAS_IMM = 0x2
    SUSPECT = 0x4
    RETRY = 0x8
    RENDEZVOUS = 0x10
    REPLY = 0x20
    PUSH = 0x40
    RNR = 0x80


class WireError(ValueError):
    pass


@dataclass
class ControlMessage:
    kind: MsgKind
    opcode: WireOp = WireOp.NONE
    flags: Flag = Flag.NONE
    tag: int = 0
    initiator_key: int = 0
    initiator_offset: int = 0
    target_key: int = 0
    target_offset: int = 0
    length: int = 0
    imm: int = 0
    payload: bytes = b""

    def payload_len(self) -> int:
        return payload_len(self.kind, self.length)

    def encode(self) -> bytes:
        want = self.payload_len()
        if len(self.payload) != want:
            raise WireError(f"{self.kind.name}: payload is {len(self.payload)} bytes, header implies {want}")
        head = HEADER.pack(int(self.kind), int(self.opcode), int(self.flags), self.tag,
                           self.initiator_key, self.initiator_offset, self.target_key,
                           self.target_offset, self.length, self.imm, bytes(16))
        pad = (-len(self.payload)) % SLOT
        return head + self.payload + bytes(pad)

    @classmethod
    def decode(cls, raw: bytes) -> "ControlMessage":
        if len(raw) < HEADER_SIZE or len(raw) % SLOT:
            raise WireError(f"bad frame length {len(raw)}")
        (kind, op, flags, tag, ikey, ioff, tkey, toff, length, imm,
         _reserved) = HEADER.unpack_from(raw)
        try:
            kind = MsgKind(kind)
            op = WireOp(op)
        except ValueError as exc:
            raise WireError(str(exc)) from None
        n = payload_len(kind, length)
        if HEADER_SIZE + n > len(raw):
            raise WireError("truncated payload")
        return cls(kind, op, Flag(flags), tag, ikey, ioff, tkey, toff, length, imm,
                   bytes(raw[HEADER_SIZE:HEADER_SIZE + n]))

    def slots(self) -> int:
        return 1 + -(-self.payload_len() // SLOT)


def payload_len(kind: MsgKind, length: int) -> int:
    if kind in (MsgKind.INLINE_WRITE_DATA, MsgKind.INLINE_READ_DATA, MsgKind.KEYMAP_SYNC):
        return length
    if kind is MsgKind.ATOMIC_REQUEST:
        return 16
    if kind is MsgKind.ATOMIC_REPLY:
        return 8
    return 0


def pack_keymap(entries: list[tuple[int, int, int, int]]) -> bytes:
    """Entries are (read_key, write_key, version_key, num_pages)."""
    return b"".join(KEYMAP_ENTRY.pack(*e) for e in entries)


def unpack_keymap(raw: bytes) -> list[tuple[int, int, int, int]]:
    if len(raw) % KEYMAP_ENTRY.size:
        raise WireError("keymap payload not a multiple of 16 bytes")
    return [KEYMAP_ENTRY.unpack_from(raw, i) for i in range(0, len(raw), KEYMAP_ENTRY.size)]
