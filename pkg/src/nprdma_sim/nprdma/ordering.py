"""Admission control for configurable ordering within one QP.

A work request conflicts with an in-flight one when they touch overlapping
bytes of the same buffer and at least one of them writes there.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Hashable, Iterable


@dataclass(frozen=True)
class Access:
    space: Hashable  # which buffer: a local region or a remote MR
    start: int
    end: int
    write: bool

    def conflicts(self, other: "Access") -> bool:
        return (self.space == other.space and self.start < other.end and other.start < self.end
                and (self.write or other.write))


def conflicting(a: Iterable[Access], b: Iterable[Access]) -> bool:
    b = list(b)
    return any(x.conflicts(y) for x in a for y in b)


class Decision(enum.Enum):
    ADMIT = "admit"
    DEFER = "defer"


class PendingOverflow(Exception):
    pass


class InFlightTable:
    """In-flight operations of one QP, keyed by a unique id."""

    def __init__(self) -> None:
        self._ops: dict[int, tuple[object, tuple[Access, ...]]] = {}

    def __len__(self) -> int:
        return len(self._ops)

    def __contains__(self, uid: int) -> bool:
        return uid in self._ops

    def add(self, uid: int, op: object, accesses: Iterable[Access]) -> None:
        self._ops[uid] = (op, tuple(accesses))

    def remove(self, uid: int) -> None:
        self._ops.pop(uid, None)

    def ops(self) -> list[object]:
        return [op for op, _ in self._ops.values()]

    def blockers(self, accesses: Iterable[Access]) -> list[object]:
        acc = tuple(accesses)
        return [op for op, theirs in self._ops.values() if conflicting(acc, theirs)]


def admit(table: InFlightTable, accesses: Iterable[Access], order_before: bool,
          barrier_active: bool) -> tuple[Decision, list[object]]:
    """Decide whether a WR at the head of the pending buffer may start now."""
    if barrier_active:
        return Decision.DEFER, []
    if order_before and len(table):
        return Decision.DEFER, table.ops()
    blockers = table.blockers(accesses)
    if blockers:
        return Decision.DEFER, blockers
    return Decision.ADMIT, []
