"""Simulated per-host virtual memory with on-demand paging, swap and pinning.

Operations mutate state immediately and return the latency they cost; the
caller decides how to account for it in simulated time (usually by
scheduling its continuation that far in the future).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable

from .sim import Engine, LatencyModel, SimError

PAGE_SIZE = 4096

UNALLOCATED = 0
PRESENT = 1
SWAPPED = 2

_ZERO_PAGE = bytes(PAGE_SIZE)


class HostMemoryError(SimError):
    pass


class AddressSpaceExhausted(HostMemoryError):
    pass


class OutOfRange(HostMemoryError):
    pass


class SwapPinned(HostMemoryError):
    pass


class NotPresent(HostMemoryError):
    pass


class UnpinUnderflow(HostMemoryError):
    pass


@dataclass(frozen=True)
class PageState:
    kind: int
    where: int | None = None  # pfn when present, swap slot when swapped

    @property
    def present(self) -> bool:
        return self.kind == PRESENT

    def __repr__(self) -> str:
        name = {UNALLOCATED: "Unallocated", PRESENT: "Present", SWAPPED: "SwappedOut"}[self.kind]
        return f"{name}({self.where})" if self.where is not None else name


class FramePool:
    """Physical frames. Contents are zero until first written."""

    def __init__(self, engine: Engine, host: str) -> None:
        self.engine = engine
        self.host = host
        self._data: dict[int, bytearray] = {}
        self._free: deque[int] = deque()
        self._next = 1
        self.in_use: set[int] = set()

    def alloc(self) -> int:
        if self._free:
            pfn = self._free.popleft()
        else:
            pfn = self._next
            self._next += 1
        self.in_use.add(pfn)
        self._data.pop(pfn, None)
        self.engine.log("frame_alloc", self.host, pfn)
        return pfn

    def release(self, pfn: int) -> None:
        self.in_use.discard(pfn)
        self._data.pop(pfn, None)
        self._free.append(pfn)
        self.engine.log("frame_release", self.host, pfn)

    def read(self, pfn: int, off: int, n: int) -> bytes:
        buf = self._data.get(pfn)
        if buf is None:
            return _ZERO_PAGE[off:off + n]
        return bytes(buf[off:off + n])

    def write(self, pfn: int, off: int, data: bytes) -> None:
        buf = self._data.get(pfn)
        if buf is None:
            buf = self._data[pfn] = bytearray(PAGE_SIZE)
        buf[off:off + len(data)] = data

    def page(self, pfn: int) -> bytes:
        buf = self._data.get(pfn)
        return _ZERO_PAGE if buf is None else bytes(buf)


class VirtualRegion:
    def __init__(self, rid: int, base_va: int, num_pages: int) -> None:
        self.rid = rid
        self.base_va = base_va
        self.num_pages = num_pages
        self.kind = [UNALLOCATED] * num_pages
        self.where: list[int | None] = [None] * num_pages
        self.alive = True

    @property
    def length(self) -> int:
        return self.num_pages * PAGE_SIZE

    def state(self, page: int) -> PageState:
        return PageState(self.kind[page], self.where[page])

    def page_states(self) -> list[PageState]:
        return [self.state(i) for i in range(self.num_pages)]

    def __repr__(self) -> str:
        return f"VirtualRegion(rid={self.rid}, base_va={self.base_va:#x}, pages={self.num_pages})"


def page_span(offset: int, length: int) -> range:
    """Page indices touched by ``[offset, offset+length)``."""
    if length <= 0:
        return range(0)
    return range(offset // PAGE_SIZE, (offset + length - 1) // PAGE_SIZE + 1)


Notifier = Callable[[VirtualRegion, int, int], "int | None"]


class HostMemory:
    """Page tables, frames, swap slots, pin counts and swap-out notifiers of one host."""

    def __init__(self, engine: Engine, latency: LatencyModel, host: str = "host",
                 max_pages: int = 1 << 22, swap_serialize: bool = False) -> None:
        self.engine = engine
        self.lat = latency
        self.host = host
        self.frames = FramePool(engine, host)
        self.max_pages = max_pages
        self.swap_serialize = swap_serialize
        self.regions: dict[int, VirtualRegion] = {}
        self._next_rid = 1
        self._next_va = 0x10000000
        self._pages_used = 0
        self._swap: dict[int, bytes] = {}
        self._next_slot = 1
        self.pins: dict[tuple[int, int], int] = {}
        self._notifiers: dict[int, tuple[int, Notifier]] = {}
        self._next_nid = 1
        self.minor_faults = 0
        self.major_faults = 0
        self.pin_calls = 0
        self.unpin_calls = 0

    # -- regions ---------------------------------------------------------

    def alloc_region(self, num_pages: int, populate: bool = False) -> VirtualRegion:
        if num_pages < 1:
            raise ValueError("num_pages must be >= 1")
        if self._pages_used + num_pages > self.max_pages:
            raise AddressSpaceExhausted(f"{self.host}: cannot map {num_pages} more pages")
        region = VirtualRegion(self._next_rid, self._next_va, num_pages)
        self._next_rid += 1
        self._next_va += (num_pages + 1) * PAGE_SIZE  # guard page between regions
        self._pages_used += num_pages
        self.regions[region.rid] = region
        if populate:
            for i in range(num_pages):
                region.kind[i] = PRESENT
                region.where[i] = self.frames.alloc()
        self.engine.log("alloc_region", self.host, region.rid, num_pages, populate)
        return region

    def free_region(self, region: VirtualRegion) -> None:
        for i in range(region.num_pages):
            if self.pins.get((region.rid, i)):
                raise SwapPinned(f"page {i} of region {region.rid} still pinned")
        for i in range(region.num_pages):
            if region.kind[i] == PRESENT:
                self.frames.release(region.where[i])
            elif region.kind[i] == SWAPPED:
                self._swap.pop(region.where[i], None)
            region.kind[i] = UNALLOCATED
            region.where[i] = None
        region.alive = False
        self._pages_used -= region.num_pages
        del self.regions[region.rid]

    def _check(self, region: VirtualRegion, offset: int, length: int) -> None:
        if not region.alive:
            raise OutOfRange(f"region {region.rid} freed")
        if offset < 0 or length < 0 or offset + length > region.length:
            raise OutOfRange(f"[{offset}, {offset + length}) outside region of {region.length} bytes")

    # -- faults ----------------------------------------------------------

    def fault_cost(self, minor: int, major: int) -> int:
        """Latency of resolving ``minor`` zero-fill and ``major`` swap-in faults together."""
        cost = minor * self.lat.minor_fault
        if major:
            if self.swap_serialize:
                cost += major * self.lat.major_fault
            else:
                cost += self.lat.major_fault + (major - 1) * self.lat.swap_page_interval
        return cost

    def _bring_in(self, region: VirtualRegion, page: int) -> int:
        """Make one page present; returns 0, 1 (minor) or 2 (major)."""
        k = region.kind[page]
        if k == PRESENT:
            return 0
        pfn = self.frames.alloc()
        if k == SWAPPED:
            slot = region.where[page]
            data = self._swap.pop(slot)
            if data != _ZERO_PAGE:
                self.frames.write(pfn, 0, data)
            kind = 2
            self.major_faults += 1
        else:
            kind = 1
            self.minor_faults += 1
        region.kind[page] = PRESENT
        region.where[page] = pfn
        self.engine.log("fault", self.host, region.rid, page, "major" if kind == 2 else "minor", pfn)
        return kind

    def resolve(self, region: VirtualRegion, pages: range | list[int]) -> int:
        """Bring every page in ``pages`` in; returns the combined fault latency."""
        minor = major = 0
        for p in pages:
            r = self._bring_in(region, p)
            if r == 1:
                minor += 1
            elif r == 2:
                major += 1
        return self.fault_cost(minor, major)

    def swap_in(self, region: VirtualRegion, page: int) -> tuple[int, int]:
        """Returns ``(pfn, latency)``. A present page is a free no-op."""
        self._check(region, page * PAGE_SIZE, PAGE_SIZE)
        cost = self.resolve(region, [page])
        return region.where[page], cost

    def cpu_access(self, region: VirtualRegion, offset: int, length: int,
                   is_write: bool = False, data: bytes | None = None) -> tuple[bytes | None, int]:
        """CPU load/store. Returns ``(bytes read or None, fault latency)``."""
        self._check(region, offset, length)
        if is_write:
            if data is None or len(data) != length:
                raise ValueError("write needs data of the stated length")
        pages = page_span(offset, length)
        cost = self.resolve(region, pages)
        if is_write:
            self._store(region, offset, data)
            return None, cost
        return self._load(region, offset, length), cost

    def _load(self, region: VirtualRegion, offset: int, length: int) -> bytes:
        out = bytearray()
        pos, end = offset, offset + length
        while pos < end:
            page, off = divmod(pos, PAGE_SIZE)
            n = min(PAGE_SIZE - off, end - pos)
            out += self.frames.read(region.where[page], off, n)
            pos += n
        return bytes(out)

    def _store(self, region: VirtualRegion, offset: int, data: bytes) -> None:
        pos, end, i = offset, offset + len(data), 0
        while pos < end:
            page, off = divmod(pos, PAGE_SIZE)
            n = min(PAGE_SIZE - off, end - pos)
            self.frames.write(region.where[page], off, data[i:i + n])
            pos += n
            i += n

    def peek(self, region: VirtualRegion, offset: int, length: int) -> bytes:
        """Logical contents, wherever they currently live, with no side effects."""
        self._check(region, offset, length)
        out = bytearray()
        pos, end = offset, offset + length
        while pos < end:
            page, off = divmod(pos, PAGE_SIZE)
            n = min(PAGE_SIZE - off, end - pos)
            k = region.kind[page]
            if k == PRESENT:
                out += self.frames.read(region.where[page], off, n)
            elif k == SWAPPED:
                out += self._swap[region.where[page]][off:off + n]
            else:
                out += _ZERO_PAGE[:n]
            pos += n
        return bytes(out)

    # -- swap-out --------------------------------------------------------

    def swap_out(self, region: VirtualRegion, page: int) -> None:
        self._check(region, page * PAGE_SIZE, PAGE_SIZE)
        if self.pins.get((region.rid, page)):
            raise SwapPinned(f"{self.host}: page {page} of region {region.rid} is pinned")
        if region.kind[page] != PRESENT:
            raise NotPresent(f"{self.host}: page {page} of region {region.rid} not present")
        pfn = region.where[page]
        slot = self._next_slot
        self._next_slot += 1
        self._swap[slot] = self.frames.page(pfn)
        fence = self.engine.now()
        for nid, (rid, cb) in list(self._notifiers.items()):
            if rid == region.rid:
                self.engine.log("notifier_call", self.host, nid, region.rid, page)
                done = cb(region, page, pfn)
                if done is not None:
                    fence = max(fence, done)
                self.engine.log("notifier_done", self.host, nid, region.rid, page, fence)
        region.kind[page] = SWAPPED
        region.where[page] = slot
        self.engine.log("swap_out", self.host, region.rid, page, pfn)
        if fence <= self.engine.now():
            self.frames.release(pfn)
        else:
            self.engine.at(fence, lambda: self.frames.release(pfn), "frame_release")

    def discard(self, region: VirtualRegion, page: int) -> None:
        """Drop a page's contents without saving them; next touch is a minor fault."""
        self.swap_out(region, page)
        self._swap.pop(region.where[page], None)
        region.kind[page] = UNALLOCATED
        region.where[page] = None
        self.engine.log("discard", self.host, region.rid, page)

    def swap_out_all(self, region: VirtualRegion) -> int:
        """Push every present, unpinned page of the region to swap."""
        n = 0
        for i in range(region.num_pages):
            if region.kind[i] == PRESENT and not self.pins.get((region.rid, i)):
                self.swap_out(region, i)
                n += 1
        return n

    def try_swap_out(self, region: VirtualRegion, page: int) -> bool:
        try:
            self.swap_out(region, page)
        except (SwapPinned, NotPresent):
            return False
        return True

    # -- pinning ---------------------------------------------------------

    def pin(self, region: VirtualRegion, first_page: int, n: int, charge: bool = True) -> int:
        """Pin ``n`` pages, faulting absent ones in. Returns fault (+ pin) latency."""
        self._check(region, first_page * PAGE_SIZE, n * PAGE_SIZE)
        pages = range(first_page, first_page + n)
        cost = self.resolve(region, pages)
        for p in pages:
            key = (region.rid, p)
            self.pins[key] = self.pins.get(key, 0) + 1
        self.pin_calls += 1
        self.engine.log("pin", self.host, region.rid, first_page, n)
        return cost + (n * self.lat.mr_pin_per_page if charge else 0)

    def unpin(self, region: VirtualRegion, first_page: int, n: int) -> None:
        pages = range(first_page, first_page + n)
        for p in pages:
            if not self.pins.get((region.rid, p)):
                raise UnpinUnderflow(f"{self.host}: page {p} of region {region.rid} not pinned")
        for p in pages:
            key = (region.rid, p)
            c = self.pins[key] - 1
            if c:
                self.pins[key] = c
            else:
                del self.pins[key]
        self.unpin_calls += 1
        self.engine.log("unpin", self.host, region.rid, first_page, n)

    def pin_count(self, region: VirtualRegion, page: int) -> int:
        return self.pins.get((region.rid, page), 0)

    # -- notifiers -------------------------------------------------------

    def register_notifier(self, region: VirtualRegion, callback: Notifier) -> int:
        nid = self._next_nid
        self._next_nid += 1
        self._notifiers[nid] = (region.rid, callback)
        return nid

    def deregister_notifier(self, nid: int) -> None:
        self._notifiers.pop(nid, None)

    def dump_hex(self, region: VirtualRegion) -> str:
        lines = []
        data = self.peek(region, 0, region.length)
        for off in range(0, len(data), 32):
            chunk = data[off:off + 32]
            if any(chunk):
                lines.append(f"{region.base_va + off:016x}  {chunk.hex()}")
        return "\n".join(lines) + ("\n" if lines else "")
