"""Device address translation for non-pinned memory regions.

Each registered region gets a Read map and a Write map. Pages that are not
known to be resident translate to the signature frame (Read) or the
black-hole frame (Write), so a device access always lands on a real frame.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .memory import PAGE_SIZE, PRESENT, HostMemory, VirtualRegion
from .sim import SimError

MAGIC_WORD = bytes.fromhex("deadbeef")


class MapKind(enum.Enum):
    READ = "read"
    WRITE = "write"


class IommuError(SimError):
    pass


class UnknownMr(IommuError):
    pass


class DuplicateMap(IommuError):
    pass


class PageNotPresent(IommuError):
    pass


@dataclass(frozen=True)
class SpecialFrames:
    signature_pfn: int
    blackhole_pfn: int
    magic_word: bytes = MAGIC_WORD

    def signature_bytes(self, in_page_offset: int, n: int) -> bytes:
        """Signature page contents at ``[in_page_offset, +n)``."""
        w = self.magic_word
        start = in_page_offset % 4
        reps = (start + n) // 4 + 1
        return (w * reps)[start:start + n]


@dataclass
class IommuMap:
    mr_id: int
    kind: MapKind
    region: VirtualRegion
    entries: list[int]


@dataclass(frozen=True)
class FlushFence:
    mr_id: int
    done_at: int


class Iommu:
    def __init__(self, memory: HostMemory, magic_word: bytes = MAGIC_WORD) -> None:
        if len(magic_word) != 4:
            raise ValueError("magic word is 4 bytes")
        self.mem = memory
        self.engine = memory.engine
        self.lat = memory.lat
        sig = memory.frames.alloc()
        memory.frames.write(sig, 0, magic_word * (PAGE_SIZE // 4))
        hole = memory.frames.alloc()
        self.special = SpecialFrames(sig, hole, magic_word)
        self.maps: dict[tuple[int, MapKind], IommuMap] = {}
        self._busy_until: dict[int, int] = {}
        self.flushes = 0
        # mutation switch for fuzz self-tests: flush neither waits nor drains DMA
        self.ignore_inflight_on_flush = False

    def special_for(self, kind: MapKind) -> int:
        return self.special.signature_pfn if kind is MapKind.READ else self.special.blackhole_pfn

    def create_map(self, mr_id: int, region: VirtualRegion, kind: MapKind) -> IommuMap:
        if (mr_id, kind) in self.maps:
            raise DuplicateMap(f"map for mr {mr_id} kind {kind.value} exists")
        hole = self.special_for(kind)
        entries = [region.where[i] if region.kind[i] == PRESENT else hole
                   for i in range(region.num_pages)]
        m = IommuMap(mr_id, kind, region, entries)
        self.maps[(mr_id, kind)] = m
        return m

    def destroy_maps(self, mr_id: int) -> None:
        for kind in MapKind:
            self.maps.pop((mr_id, kind), None)
        self._busy_until.pop(mr_id, None)

    def _get(self, mr_id: int, kind: MapKind) -> IommuMap:
        try:
            return self.maps[(mr_id, kind)]
        except KeyError:
            raise UnknownMr(f"no {kind.value} map for mr {mr_id}") from None

    def translate(self, mr_id: int, kind: MapKind, page: int) -> int:
        m = self._get(mr_id, kind)
        if not 0 <= page < len(m.entries):
            raise IndexError(f"page {page} outside mr {mr_id}")
        return m.entries[page]

    def is_mapped(self, mr_id: int, page: int) -> bool:
        """True when both maps point at a real data frame."""
        r = self.maps.get((mr_id, MapKind.READ))
        return r is not None and r.entries[page] != self.special.signature_pfn

    def on_swap_out(self, mr_id: int, vpage: int) -> int:
        """Repoint both maps at the special frames and flush; returns fence time."""
        changed = False
        for kind in MapKind:
            m = self.maps.get((mr_id, kind))
            if m is None:
                continue
            hole = self.special_for(kind)
            if m.entries[vpage] != hole:
                m.entries[vpage] = hole
                changed = True
        if not changed:
            return self.engine.now()
        self.engine.log("iommu_remap_out", self.mem.host, mr_id, vpage)
        return self.flush(mr_id).done_at

    def on_swap_in(self, mr_id: int, vpage: int, pfn: int | None = None) -> None:
        m = self._get(mr_id, MapKind.READ)
        region = m.region
        if region.kind[vpage] != PRESENT:
            raise PageNotPresent(f"page {vpage} of mr {mr_id} not present")
        pfn = region.where[vpage] if pfn is None else pfn
        for kind in MapKind:
            mk = self.maps.get((mr_id, kind))
            if mk is not None and mk.entries[vpage] != pfn:
                mk.entries[vpage] = pfn
                self.engine.log("iommu_remap_in", self.mem.host, mr_id, vpage, kind.value, pfn)

    def flush(self, mr_id: int) -> FlushFence:
        now = self.engine.now()
        if self.ignore_inflight_on_flush:
            done = now
        else:
            done = max(now + self.lat.iommu_flush, self._busy_until.get(mr_id, 0))
        self.flushes += 1
        self.engine.log("iommu_flush", self.mem.host, mr_id, done)
        return FlushFence(mr_id, done)

    def note_unit(self, mr_id: int, pfn: int, start: int, end: int, write: bool,
                  wr_id: int = 0, initiator: str = "") -> None:
        """Record DMA units that went through map ``mr_id``."""
        if end > self._busy_until.get(mr_id, 0):
            self._busy_until[mr_id] = end
        self.engine.log("dma_unit", self.mem.host, mr_id, pfn, start, end, write, wr_id, initiator)

    def cpu_view(self, mr_id: int, offset: int, length: int) -> bytes:
        """Read bytes the way the host CPU sees the remapped Read region."""
        m = self._get(mr_id, MapKind.READ)
        frames = self.mem.frames
        out = bytearray()
        pos, end = offset, offset + length
        while pos < end:
            page, off = divmod(pos, PAGE_SIZE)
            n = min(PAGE_SIZE - off, end - pos)
            out += frames.read(m.entries[page], off, n)
            pos += n
        return bytes(out)
