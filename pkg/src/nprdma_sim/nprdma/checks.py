"""Content checks against the signature page."""

from __future__ import annotations

from ..iommu import MAGIC_WORD
from ..memory import PAGE_SIZE


def probe_points(page_offset: int, length: int, unit: int = 256) -> list[tuple[int, int]]:
    """Bytes to compare for each page-anchored unit overlapping the range.

    Returns ``(offset, n)`` pairs in absolute page-relative coordinates: the
    first word-aligned 4 in-range bytes of each unit, or when no aligned word
    fits, the first ``min(4, span)`` in-range bytes.
    """
    out = []
    pos, end = page_offset, page_offset + length
    while pos < end:
        u_end = min((pos // unit + 1) * unit, end)
        w = (pos + 3) & ~3
        if w + 4 <= u_end:
            out.append((w, 4))
        else:
            out.append((pos, min(4, u_end - pos)))
        pos = u_end
    return out


def signature_bytes(offset: int, n: int, magic: bytes = MAGIC_WORD) -> bytes:
    start = offset % 4
    return (magic * ((start + n) // 4 + 1))[start:start + n]


def signature_check(data: bytes, base_page_offset: int, unit: int = 256,
                    magic: bytes = MAGIC_WORD) -> bool:
    """True (suspect) if any unit's probe bytes equal the signature page there.

    ``base_page_offset`` is where ``data[0]`` sits relative to a page boundary
    (any multiple of the page size may be added).
    """
    if not data:
        raise ValueError("empty range")
    base = base_page_offset % PAGE_SIZE
    for off, n in probe_points(base, len(data), unit):
        i = off - base
        if data[i:i + n] == signature_bytes(off, n, magic):
            return True
    return False


def scan_check(data: bytes, base_page_offset: int, unit: int = 256,
               magic: bytes = MAGIC_WORD) -> bool:
    """Slow reference: does any whole in-range unit match the signature byte for byte."""
    base = base_page_offset % PAGE_SIZE
    pos, end = base, base + len(data)
    while pos < end:
        u_end = min((pos // unit + 1) * unit, end)
        if data[pos - base:u_end - base] == signature_bytes(pos, u_end - pos, magic):
            return True
        pos = u_end
    return False
