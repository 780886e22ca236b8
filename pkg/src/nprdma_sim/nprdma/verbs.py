"""Non-pinned RDMA verbs on top of a commodity NIC.

Every registered region is exposed through three NIC MRs: a Read MR and a
Write MR that translate through the IOMMU maps, and a pinned Version MR with
one 4-byte counter per page. One-sided operations run optimistically and are
validated afterwards, either by looking for the signature pattern in the
moved bytes (short transfers) or by bracketing the transfer with two version
reads (long transfers). Anything suspicious is redone through the target's
software over a small pinned control channel.
"""

from __future__ import annotations

import enum
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from ..host import Host
from ..iommu import MapKind
from ..memory import PAGE_SIZE, PRESENT, VirtualRegion, page_span
from ..rnic import InvalidRange, MrKind, NicWqe, Opcode, QpState, QueueFull, Status
from ..sim import SimError
from .checks import probe_points, signature_bytes, signature_check
from .ordering import Access, Decision, InFlightTable, PendingOverflow, admit
from .wire import HEADER_SIZE, KEYMAP_ENTRY, ControlMessage, Flag, MsgKind, WireOp, pack_keymap, unpack_keymap

_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")
_MASK64 = (1 << 64) - 1


class NpError(SimError):
    pass


class DuplicateRegistration(NpError):
    pass


class NotConnected(NpError):
    pass


class AlreadyConnected(NpError):
    pass


class NpOpcode(enum.Enum):
    READ = "read"
    WRITE = "write"
    ATOMIC = "atomic"
    SEND = "send"
    RECV = "recv"
    WRITE_IMM = "write_imm"


class AtomicKind(enum.Enum):
    FAA = "faa"
    CAS = "cas"


@dataclass
class NpConfig:
    version_threshold: int = 4096
    inline_threshold: int = 1024
    no_reverse_ops: bool = False
    rendezvous_send: bool = False
    retry_limit: int = 3
    pending_limit: int = 1 << 16
    batch_unsignaled: bool = True
    flush_batch_on_poll: bool = True
    precheck: bool = True
    max_batch: int = 256
    rnr_retry: int = 7
    rnr_delay: int = 10_000
    coalesce_limit: int = PAGE_SIZE

    def __post_init__(self) -> None:
        if self.version_threshold < 1 or self.inline_threshold < 1:
            raise ValueError("thresholds must be positive")
        if self.retry_limit < 1:
            raise ValueError("retry_limit must be >= 1")
        if not 1 <= self.coalesce_limit <= PAGE_SIZE:
            raise ValueError("coalesce_limit must be within one page")


@dataclass
class MrTriple:
    """Read, Write and Version MRs covering one region."""

    read_key: int
    write_key: int
    version_key: int
    region: VirtualRegion
    num_pages: int
    mr_id: int
    version_region: VirtualRegion
    notifier_id: int = 0
    setup_ns: int = 0
    alive: bool = True

    @property
    def length(self) -> int:
        return self.num_pages * PAGE_SIZE


@dataclass
class NpWorkRequest:
    opcode: NpOpcode
    local_mr: MrTriple | None = None
    local_offset: int = 0
    length: int = 0
    remote_key: int = 0
    remote_offset: int = 0
    wr_id: int = 0
    signaled: bool = True
    order_before: bool = False
    order_after: bool = False
    imm: int | None = None
    atomic: AtomicKind = AtomicKind.FAA
    compare_add: int = 0
    swap: int = 0


@dataclass
class Completion:
    wr_id: int
    status: Status
    opcode: NpOpcode
    byte_len: int = 0
    imm: int | None = None
    qp_num: int = 0
    completed_at: int = 0
    rtts: int = 0
    redone: bool = False
    path: str = "optimistic"
    posted_at: int = 0

    @property
    def ok(self) -> bool:
        return self.status is Status.SUCCESS


class NpCq:
    def __init__(self, cq_id: int) -> None:
        self.cq_id = cq_id
        self.entries: deque[Completion] = deque()
        self.qps: list["NpQp"] = []


@dataclass(eq=False)
class _Op:
    uid: int
    wr: NpWorkRequest
    qp: "NpQp"
    accesses: tuple
    posted_at: int
    admitted_at: int = -1
    rtts: int = 0
    redone: bool = False
    path: str = "optimistic"
    done: bool = False
    phase: int = 0
    rounds: int = 0
    payload: bytes | None = None
    key_retry: bool = False
    pins: list = field(default_factory=list)
    result: bytes | None = None


@dataclass(eq=False)
class _BatchEntry:
    op: _Op
    payload: bytes
    lv: tuple
    done: Callable[[bool], None]
    written: bool = False


@dataclass(eq=False)
class _NpRecv:
    wr: NpWorkRequest
    pinned: bool = False
    nic_wqe: NicWqe | None = None
    nic_posted: bool = False
    qp: "NpQp | None" = None


class _Scratch:
    """Pinned bounce pages for auxiliary and version reads, handed out as page runs."""

    def __init__(self, lib: "NpRdma", pages: int) -> None:
        self.lib = lib
        self.chunks: list[tuple[VirtualRegion, int, list[bool]]] = []
        self._grow(pages)

    def _grow(self, pages: int) -> None:
        region = self.lib._infra_region(pages)
        mr = self.lib.nic.register_mr(region, MrKind.PINNED)
        self.chunks.append((region, mr.key, [False] * pages))

    def alloc(self, nbytes: int) -> tuple[int, int, int, int]:
        """Returns ``(key, offset, chunk, npages)``."""
        need = max(1, -(-nbytes // PAGE_SIZE))
        for ci, (_, key, used) in enumerate(self.chunks):
            run = 0
            for i, u in enumerate(used):
                run = 0 if u else run + 1
                if run == need:
                    first = i - need + 1
                    for j in range(first, i + 1):
                        used[j] = True
                    return key, first * PAGE_SIZE, ci, need
        self._grow(max(need, 16))
        return self.alloc(nbytes)

    def release(self, handle: tuple[int, int, int, int]) -> None:
        _, off, ci, n = handle
        used = self.chunks[ci][2]
        first = off // PAGE_SIZE
        for j in range(first, first + n):
            used[j] = False

    def read(self, handle: tuple[int, int, int, int], n: int) -> bytes:
        region = self.chunks[handle[2]][0]
        return self.lib.mem.peek(region, handle[1], n)


class NpQp:
    """Application QP: one NIC QP of triple depth plus a pinned control channel."""

    def __init__(self, lib: "NpRdma", qp_num: int, depth: int, cq: NpCq, recv_cq: NpCq) -> None:
        self.lib = lib
        self.qp_num = qp_num
        self.depth = depth
        self.cq = cq
        self.recv_cq = recv_cq
        self.nic_qp = lib.nic.create_qp(3 * depth)
        self.nic_qp.control_handler = self._on_control_bytes
        self.ctrl_bytes = 64 * depth
        self.ctrl_region = lib._infra_region(-(-self.ctrl_bytes // PAGE_SIZE))
        self.scratch = _Scratch(lib, depth)
        self.peer: NpQp | None = None
        self.table = InFlightTable()
        self.pending: deque[_Op] = deque()
        self.barrier: _Op | None = None
        self.outstanding = 0
        self.nic_backlog: deque[NicWqe] = deque()
        self.batch: list[_BatchEntry] = []
        self.keymap: dict[int, tuple[int, int, int]] = {}
        self.sync_state = "none"  # none | pending | done
        self.sync_waiters: list[Callable[[], None]] = []
        self.waiting: dict[int, Callable[[ControlMessage], None]] = {}
        self.next_tag = 1
        self.recvs: deque[_NpRecv] = deque()
        self.recv_post_at = 0
        self.target_pins: dict[int, list[tuple[VirtualRegion, int, int]]] = {}
        self.errored = False
        self.destroyed = False

    @property
    def inline_limit(self) -> int:
        return min(self.lib.config.inline_threshold, self.ctrl_bytes - HEADER_SIZE)

    def new_tag(self) -> int:
        t = self.next_tag
        self.next_tag += 1
        return t

    def _on_control_bytes(self, raw: bytes) -> None:
        msg = ControlMessage.decode(raw)
        self.lib._poll(lambda: self.lib._on_control(self, msg))

    def __repr__(self) -> str:
        return f"NpQp({self.lib.name}:{self.qp_num})"


class NpRdma:
    """Per-process library instance on one host, with one shared polling loop."""

    def __init__(self, host: Host, config: NpConfig | None = None) -> None:
        self.host = host
        self.name = host.name
        self.engine = host.engine
        self.lat = host.lat
        self.mem = host.mem
        self.iommu = host.iommu
        self.nic = host.nic
        self.config = config or NpConfig()
        self.magic = self.iommu.special.magic_word
        self.triples: dict[int, MrTriple] = {}       # by read key
        self._by_rid: dict[int, MrTriple] = {}
        self.qps: dict[int, NpQp] = {}
        self.cqs: list[NpCq] = []
        self.infra_rids: set[int] = set()
        self.observers: list[Callable[[Completion, NpWorkRequest], None]] = []
        self.stats: dict[str, int] = {}
        self.atomic_exec: dict[tuple, int] = {}
        self._poller_free = 0
        self._next_uid = 1
        self._next_qp = 1

    def _count(self, key: str, n: int = 1) -> None:
        self.stats[key] = self.stats.get(key, 0) + n

    def _infra_region(self, pages: int) -> VirtualRegion:
        region = self.mem.alloc_region(pages, populate=True)
        self.mem.pin(region, 0, pages)
        self.infra_rids.add(region.rid)
        return region

    # -- polling loop ----------------------------------------------------

    def _poll(self, fn: Callable[[], None]) -> None:
        """Hand ``fn`` to the shared polling loop; pickups are serialized."""
        t = max(self.engine.now(), self._poller_free) + self.lat.poll_delay
        self._poller_free = t
        self.engine.at(t, fn, "poll")

    # -- memory registration ---------------------------------------------

    def np_register_mr(self, region: VirtualRegion) -> MrTriple:
        if region.rid in self._by_rid and self._by_rid[region.rid].alive:
            raise DuplicateRegistration(f"region {region.rid} already registered")
        n = region.num_pages
        mr_id = self.nic.new_mr_id()
        self.iommu.create_map(mr_id, region, MapKind.READ)
        self.iommu.create_map(mr_id, region, MapKind.WRITE)
        vregion = self._infra_region(-(-4 * n // PAGE_SIZE))
        rmr = self.nic.register_mr(region, MrKind.READ, mr_id)
        wmr = self.nic.register_mr(region, MrKind.WRITE, mr_id)
        vmr = self.nic.register_mr(vregion, MrKind.PINNED)
        t = MrTriple(rmr.key, wmr.key, vmr.key, region, n, mr_id, vregion)
        for p in range(n):
            self._set_version(t, p, 1 if region.kind[p] == PRESENT else 0)
        t.notifier_id = self.mem.register_notifier(
            region, lambda reg, page, pfn, t=t: self._notifier(t, page))
        t.setup_ns = self.lat.np_mr_reg_base + n * self.lat.iommu_map_per_page
        self.triples[t.read_key] = t
        self._by_rid[region.rid] = t
        self.engine.log("np_reg_mr", self.name, mr_id, t.read_key, n, t.setup_ns)
        for qp in self.qps.values():
            if qp.sync_state == "done" and qp.peer is not None and not qp.destroyed:
                self._push_keys(qp, [t])
        return t

    def pinned_register_cost(self, region: VirtualRegion) -> int:
        """Registration time of the same region as a conventional pinned MR."""
        minor = sum(1 for k in region.kind if k != PRESENT)
        return self.lat.mr_reg_base + self.mem.fault_cost(minor, 0) + region.num_pages * self.lat.mr_pin_per_page

    def version(self, t: MrTriple, page: int) -> int:
        vr = t.version_region
        pg, off = divmod(4 * page, PAGE_SIZE)
        return _U32.unpack(self.mem.frames.read(vr.where[pg], off, 4))[0]

    def versions(self, t: MrTriple) -> list[int]:
        return [self.version(t, p) for p in range(t.num_pages)]

    def _set_version(self, t: MrTriple, page: int, v: int) -> None:
        vr = t.version_region
        pg, off = divmod(4 * page, PAGE_SIZE)
        self.mem.frames.write(vr.where[pg], off, _U32.pack(v & 0xFFFFFFFF))

    def _notifier(self, t: MrTriple, page: int) -> int:
        v = self.version(t, page)
        nv = v + 1 if v % 2 else v + 2
        self._set_version(t, page, nv)
        self.engine.log("version", self.name, t.mr_id, page, v, nv, "out")
        return self.iommu.on_swap_out(t.mr_id, page)

    def observe(self, t: MrTriple, pages) -> int:
        """Remap resident pages whose swap-in has not been seen yet; returns CPU cost."""
        cost = 0
        region = t.region
        for p in pages:
            if region.kind[p] == PRESENT and not self.iommu.is_mapped(t.mr_id, p):
                self.iommu.on_swap_in(t.mr_id, p)
                v = self.version(t, p)
                if v % 2 == 0:
                    self._set_version(t, p, v + 1)
                    self.engine.log("version", self.name, t.mr_id, p, v, v + 1, "in")
                cost += self.lat.iommu_update_per_page
        return cost

    def fault_in(self, t: MrTriple, page: int) -> int:
        """Swap a page in and make it visible to the NIC at once; returns latency."""
        cost = self.mem.resolve(t.region, [page])
        return cost + self.observe(t, [page])

    def np_dereg_mr(self, t: MrTriple) -> None:
        if not t.alive:
            raise NpError("MR already deregistered")
        t.alive = False
        for qp in list(self.qps.values()):
            for op in list(qp.table.ops()) + list(qp.pending):
                if op.wr.local_mr is t:
                    self._complete(op, Status.LOC_PROT_ERR)
        self.mem.deregister_notifier(t.notifier_id)
        for k in (t.read_key, t.write_key, t.version_key):
            self.nic.deregister_mr(k)
        self.iommu.destroy_maps(t.mr_id)
        self.triples.pop(t.read_key, None)
        self._by_rid.pop(t.region.rid, None)
        self.engine.log("np_dereg_mr", self.name, t.mr_id)

    # -- QPs and CQs -----------------------------------------------------

    def np_create_cq(self) -> NpCq:
        cq = NpCq(len(self.cqs) + 1)
        self.cqs.append(cq)
        return cq

    def np_create_qp(self, depth: int, cq: NpCq | None = None, recv_cq: NpCq | None = None) -> NpQp:
        if depth < 1:
            raise ValueError("depth must be >= 1")
        cq = cq or self.np_create_cq()
        qp = NpQp(self, self._next_qp, depth, cq, recv_cq or cq)
        self._next_qp += 1
        self.qps[qp.qp_num] = qp
        cq.qps.append(qp)
        if qp.recv_cq is not cq:
            qp.recv_cq.qps.append(qp)
        return qp

    def np_connect(self, qp: NpQp, peer: NpQp) -> None:
        if qp.peer is not None or peer.peer is not None:
            raise AlreadyConnected("QP already connected")
        qp.peer, peer.peer = peer, qp
        self.nic.connect(qp.nic_qp, peer.nic_qp)

    def np_poll_cq(self, cq: NpCq, max_entries: int | None = None) -> list[Completion]:
        out: list[Completion] = []
        while cq.entries and (max_entries is None or len(out) < max_entries):
            out.append(cq.entries.popleft())
        if not out and self.config.flush_batch_on_poll:
            for qp in cq.qps:
                if qp.batch:
                    self._flush_batch(qp)
        return out

    # -- posting and admission -------------------------------------------

    def _accesses(self, qp: NpQp, wr: NpWorkRequest) -> tuple[Access, ...]:
        op = wr.opcode
        out = []
        if wr.local_mr is not None and wr.length:
            lw = op in (NpOpcode.READ, NpOpcode.ATOMIC, NpOpcode.RECV)
            out.append(Access(("L", wr.local_mr.region.rid), wr.local_offset,
                              wr.local_offset + wr.length, lw))
        if op in (NpOpcode.READ, NpOpcode.WRITE, NpOpcode.WRITE_IMM, NpOpcode.ATOMIC):
            n = 8 if op is NpOpcode.ATOMIC else wr.length
            rw = op is not NpOpcode.READ
            out.append(Access(("R", wr.remote_key), wr.remote_offset, wr.remote_offset + n, rw))
        return tuple(out)

    def _validate(self, wr: NpWorkRequest) -> None:
        if wr.opcode is NpOpcode.ATOMIC:
            if wr.length not in (0, 8):
                raise InvalidRange("atomics move 8 bytes")
            wr.length = 8
            if wr.remote_offset % 8:
                raise InvalidRange("atomic target must be 8-byte aligned")
        if wr.length < 1:
            raise InvalidRange("length must be >= 1")
        t = wr.local_mr
        if t is None or not t.alive:
            raise InvalidRange("local MR missing or deregistered")
        if wr.local_offset < 0 or wr.local_offset + wr.length > t.length:
            raise InvalidRange("local range outside MR")
        if wr.remote_offset < 0:
            raise InvalidRange("negative remote offset")
        if wr.imm is not None and not 0 <= wr.imm <= 0xFFFFFFFF:
            raise InvalidRange("imm is 4 bytes")

    def np_post(self, qp: NpQp, wr: NpWorkRequest) -> None:
        if qp.destroyed or qp.errored:
            raise NotConnected("QP not usable")
        if qp.peer is None:
            raise NotConnected("QP not connected")
        if wr.opcode is NpOpcode.RECV:
            self.np_post_recv(qp, wr)
            return
        self._validate(wr)
        if qp.outstanding >= qp.depth:
            raise QueueFull(f"{qp!r}: {qp.outstanding} outstanding of depth {qp.depth}")
        if len(qp.pending) >= self.config.pending_limit:
            raise PendingOverflow(f"{qp!r}: pending buffer full")
        op = _Op(self._next_uid, wr, qp, self._accesses(qp, wr), self.engine.now())
        self._next_uid += 1
        qp.outstanding += 1
        self.engine.log("np_post", self.name, qp.qp_num, op.uid, wr.wr_id, wr.opcode.value, wr.length)
        if qp.pending:
            qp.pending.append(op)
            self._flush_if_blocked(qp, op)
        else:
            qp.pending.append(op)
            self._pump(qp)

    def _flush_if_blocked(self, qp: NpQp, op: _Op) -> None:
        if qp.batch and any(e.op in qp.table.blockers(op.accesses) for e in qp.batch):
            self._flush_batch(qp)

    def _pump(self, qp: NpQp) -> None:
        while qp.pending and not qp.destroyed and not qp.errored:
            op = qp.pending[0]
            barrier = qp.barrier is not None and not qp.barrier.done
            decision, blockers = admit(qp.table, op.accesses, op.wr.order_before, barrier)
            if decision is Decision.DEFER:
                if qp.batch and (op.wr.order_before or any(e.op in blockers for e in qp.batch)):
                    self._flush_batch(qp)
                self.engine.log("np_defer", self.name, qp.qp_num, op.uid)
                return
            qp.pending.popleft()
            qp.table.add(op.uid, op, op.accesses)
            op.admitted_at = self.engine.now()
            if op.wr.order_after:
                qp.barrier = op
            self.engine.log("np_admit", self.name, qp.qp_num, op.uid, op.wr.wr_id)
            self.engine.schedule(self.lat.sw_overhead, lambda op=op: self._dispatch(op))

    def _live(self, op: _Op) -> bool:
        return not op.done and not op.qp.destroyed and not op.qp.errored

    def _later(self, op: _Op, delay: int, fn: Callable[[], None]) -> None:
        def run() -> None:
            if self._live(op):
                fn()
        if delay <= 0:
            run()
        else:
            self.engine.schedule(delay, run)

    def _dispatch(self, op: _Op) -> None:
        if not self._live(op):
            return
        self._with_keys(op, lambda: self._route(op))

    def _route(self, op: _Op) -> None:
        wr = op.wr
        code = wr.opcode
        if code is NpOpcode.ATOMIC:
            self._atomic(op)
        elif code is NpOpcode.SEND:
            self._send(op)
        elif code is NpOpcode.WRITE_IMM:
            self._precheck(op, lambda: self._write_imm(op))
        else:
            self._precheck(op, lambda: self._optimistic(op, self._after_optimistic(op)))

    def _after_optimistic(self, op: _Op) -> Callable[[bool], None]:
        def done(clean: bool) -> None:
            if clean:
                self._complete(op, Status.SUCCESS)
            else:
                self._engage_two_sided(op)
        return done

    # -- completion ------------------------------------------------------

    def _complete(self, op: _Op, status: Status, imm: int | None = None) -> None:
        if op.done:
            return
        op.done = True
        qp = op.qp
        for region, first, n in op.pins:
            self.mem.unpin(region, first, n)
        op.pins.clear()
        if op.uid in qp.table:
            qp.table.remove(op.uid)
        else:
            try:
                qp.pending.remove(op)
            except ValueError:
                pass
        qp.outstanding -= 1
        wr = op.wr
        now = self.engine.now()
        comp = Completion(wr.wr_id, status, wr.opcode, wr.length if status is Status.SUCCESS else 0,
                          imm, qp.qp_num, now, op.rtts, op.redone, op.path, op.posted_at)
        self.engine.log("np_cqe", self.name, qp.qp_num, op.uid, wr.wr_id, status.value,
                        op.path, op.rtts)
        for obs in self.observers:
            obs(comp, wr)
        if wr.signaled or status is not Status.SUCCESS:
            qp.cq.entries.append(comp)
        if qp.barrier is op:
            qp.barrier = None
        if not qp.destroyed:
            self._pump(qp)

    def _fail_qp(self, qp: NpQp, status: Status = Status.FLUSH_ERR) -> None:
        """Transport failure: flush everything outstanding with error completions."""
        if qp.errored:
            return
        qp.errored = True
        self.engine.log("np_qp_error", self.name, qp.qp_num, status.value)
        ops = list(qp.table.ops()) + list(qp.pending)
        qp.batch.clear()
        qp.nic_backlog.clear()
        for op in ops:
            self._complete(op, status)
        for recv in list(qp.recvs):
            self._recv_done(qp, recv, Status.FLUSH_ERR, 0, None)
        qp.recvs.clear()
        self._release_target_pins(qp)
        qp.waiting.clear()
        qp.sync_waiters.clear()

    def _release_target_pins(self, qp: NpQp) -> None:
        for pins in qp.target_pins.values():
            for region, first, n in pins:
                if region.alive:
                    self.mem.unpin(region, first, n)
        qp.target_pins.clear()

    def np_destroy_qp(self, qp: NpQp) -> None:
        if qp.destroyed:
            return
        self._fail_qp(qp)
        qp.destroyed = True
        self.nic.destroy_qp(qp.nic_qp)
        peer = qp.peer
        if peer is not None and not peer.destroyed:
            peer.lib._fail_qp(peer, Status.RETRY_EXC_ERR)
        self.qps.pop(qp.qp_num, None)
        self.engine.log("np_destroy_qp", self.name, qp.qp_num)

    # -- key map synchronization -----------------------------------------

    def _with_keys(self, op: _Op, cont: Callable[[], None]) -> None:
        qp = op.qp
        wr = op.wr
        needs = wr.opcode in (NpOpcode.READ, NpOpcode.WRITE, NpOpcode.WRITE_IMM, NpOpcode.ATOMIC)
        if not needs:
            cont()
            return
        if qp.sync_state == "done":
            if wr.remote_key in qp.keymap or op.key_retry:
                cont()
                return
            op.key_retry = True
            qp.sync_state = "none"
        qp.sync_waiters.append(lambda: self._later(op, 0, cont))
        if qp.sync_state == "none":
            self._start_sync(qp)

    def _key_entries(self, triples) -> list[tuple[int, int, int, int]]:
        return [(t.read_key, t.write_key, t.version_key, t.num_pages) for t in triples if t.alive]

    def _chunks(self, qp: NpQp, entries: list) -> list[list]:
        per = max(1, (qp.ctrl_bytes - HEADER_SIZE) // KEYMAP_ENTRY.size)
        return [entries[i:i + per] for i in range(0, len(entries), per)] or [[]]

    def _start_sync(self, qp: NpQp) -> None:
        qp.sync_state = "pending"
        self._count("keymap_sync")
        self.engine.log("keymap_sync", self.name, qp.qp_num, "request")
        chunks = self._chunks(qp, self._key_entries(self.triples.values()))
        for ch in chunks[:-1]:
            self._send_keys(qp, ch, Flag.PUSH)
        self._send_keys(qp, chunks[-1], Flag.NONE)

    def _push_keys(self, qp: NpQp, triples: list[MrTriple]) -> None:
        for ch in self._chunks(qp, self._key_entries(triples)):
            self._send_keys(qp, ch, Flag.PUSH)

    def _send_keys(self, qp: NpQp, entries: list, flags: Flag) -> None:
        raw = pack_keymap(entries)
        self._send_ctrl(qp, ControlMessage(MsgKind.KEYMAP_SYNC, flags=flags, length=len(raw), payload=raw))

    def _on_keymap(self, qp: NpQp, msg: ControlMessage) -> None:
        for rk, wk, vk, n in unpack_keymap(msg.payload):
            qp.keymap[rk] = (wk, vk, n)
        if msg.flags & Flag.PUSH:
            return
        if msg.flags & Flag.REPLY:
            self.engine.log("keymap_sync", self.name, qp.qp_num, "done")
            qp.sync_state = "done"
            waiters, qp.sync_waiters = qp.sync_waiters, []
            for fn in waiters:
                fn()
            return
        chunks = self._chunks(qp, self._key_entries(self.triples.values()))
        for ch in chunks[:-1]:
            self._send_keys(qp, ch, Flag.PUSH)
        self._send_keys(qp, chunks[-1], Flag.REPLY)

    # -- control channel and NIC posting ---------------------------------

    def _send_ctrl(self, qp: NpQp, msg: ControlMessage) -> None:
        raw = msg.encode()
        if len(raw) > qp.ctrl_bytes:
            raise NpError(f"control message of {len(raw)} bytes exceeds channel of {qp.ctrl_bytes}")
        self.engine.log("ctrl_send", self.name, qp.qp_num, msg.kind.name, msg.tag, msg.length)
        self._count("ctrl_msgs")
        self._nic_post(qp, NicWqe(Opcode.SEND, control=raw, signaled=False,
                                  callback=lambda cqe: self._ctrl_sent(qp, cqe)))

    def _ctrl_sent(self, qp: NpQp, cqe) -> None:
        if not cqe.ok and not qp.errored and not qp.destroyed:
            self._poll(lambda: self._fail_qp(qp, cqe.status))

    def _nic_post(self, qp: NpQp, wqe: NicWqe) -> None:
        if qp.errored or qp.destroyed:
            return
        inner = wqe.callback

        def cb(cqe) -> None:
            if inner is not None:
                inner(cqe)
            self._drain_backlog(qp)

        wqe.callback = cb
        nq = qp.nic_qp
        if qp.nic_backlog or len(nq.active) >= nq.depth:
            qp.nic_backlog.append(wqe)
            return
        self.nic.post_wqe(nq, wqe)

    def _drain_backlog(self, qp: NpQp) -> None:
        nq = qp.nic_qp
        while qp.nic_backlog and len(nq.active) < nq.depth and nq.state is QpState.RTS:
            self.nic.post_wqe(nq, qp.nic_backlog.popleft())

    def _nic_id(self, op: _Op) -> int:
        op.phase += 1
        return op.uid * 16 + 1 + (op.phase - 1) % 15

    def _nic_ok(self, op: _Op, cqe) -> bool:
        """False (and the op is failed) when a data WQE did not succeed."""
        if not self._live(op):
            return False
        if cqe.ok:
            return True
        status = cqe.status
        self._poll(lambda: self._fail_qp(op.qp, status))
        return False

    # -- optimistic one-sided path ---------------------------------------

    def _remote(self, op: _Op) -> tuple[int, int, int] | None:
        """(write_key, version_key, num_pages) of the target MR, or None after failing the op."""
        wr = op.wr
        ent = op.qp.keymap.get(wr.remote_key)
        n = 8 if wr.opcode is NpOpcode.ATOMIC else wr.length
        if ent is None or wr.remote_offset + n > ent[2] * PAGE_SIZE:
            self._complete(op, Status.REM_ACCESS_ERR)
            return None
        return ent

    def _precheck(self, op: _Op, cont: Callable[[], None]) -> None:
        wr = op.wr
        t = wr.local_mr
        pages = page_span(wr.local_offset, wr.length)
        if not self.config.precheck:
            cont()
            return
        cost = len(pages) * self.lat.cpu_check_per_page
        suspect = []
        start, end = wr.local_offset, wr.local_offset + wr.length
        for p in pages:
            lo = max(start, p * PAGE_SIZE)
            hi = min(end, (p + 1) * PAGE_SIZE)
            off, n = probe_points(lo % PAGE_SIZE, hi - lo, PAGE_SIZE)[0]
            got = self.iommu.cpu_view(t.mr_id, p * PAGE_SIZE + off, n)
            if got == signature_bytes(off, n, self.magic):
                suspect.append(p)
        if suspect:
            self._count("local_faults")
            self.engine.log("local_fault", self.name, t.mr_id, tuple(suspect))
            cost += self.mem.resolve(t.region, suspect) + self.observe(t, suspect)
        self._later(op, cost, cont)

    def _local_versions(self, op: _Op) -> tuple:
        t = op.wr.local_mr
        return tuple(self.version(t, p) for p in page_span(op.wr.local_offset, op.wr.length))

    def _optimistic(self, op: _Op, done: Callable[[bool], None], batched: bool = True) -> None:
        if self._remote(op) is None:
            return
        wr = op.wr
        if wr.length > self.config.version_threshold:
            self._versioned(op, done)
        elif wr.opcode is NpOpcode.READ:
            self._sig_read(op, done)
        else:
            self._sig_write(op, done, batched)

    def _sig_read(self, op: _Op, done: Callable[[bool], None]) -> None:
        wr = op.wr
        t = wr.local_mr
        lv = self._local_versions(op)
        op.rtts += 1

        def landed(cqe) -> None:
            if self._nic_ok(op, cqe):
                self._poll(lambda: self._later(op, 0, check))

        def check() -> None:
            data = self.iommu.cpu_view(t.mr_id, wr.local_offset, wr.length)
            # remote faults show the signature at remote offsets, local ones at local offsets
            suspect = (signature_check(data, wr.remote_offset, self.nic.unit, self.magic)
                       or signature_check(data, wr.local_offset, self.nic.unit, self.magic)
                       or self._local_versions(op) != lv)
            cost = len(page_span(wr.local_offset, wr.length)) * self.lat.cpu_check_per_page
            self.engine.log("sig_check", self.name, op.uid, not suspect)
            self._later(op, cost, lambda: done(not suspect))

        self._nic_post(op.qp, NicWqe(Opcode.READ, t.write_key, wr.local_offset, wr.length,
                                     wr.remote_key, wr.remote_offset, wr_id=self._nic_id(op),
                                     callback=landed))

    def _versioned(self, op: _Op, done: Callable[[bool], None]) -> None:
        wr = op.wr
        qp = op.qp
        t = wr.local_mr
        _, vkey, _ = qp.keymap[wr.remote_key]
        rpages = page_span(wr.remote_offset, wr.length)
        vlen = 4 * len(rpages)
        voff = 4 * rpages.start
        h1 = qp.scratch.alloc(vlen)
        h2 = qp.scratch.alloc(vlen)
        lv = self._local_versions(op)
        times = [0, 0]
        op.rtts += 1

        def release() -> None:
            qp.scratch.release(h1)
            qp.scratch.release(h2)

        def stamp(i: int) -> Callable[[int], None]:
            def f(t_: int) -> None:
                times[i] = t_
                self.engine.log("ver_read", self.name, op.uid, i)
            return f

        def last(cqe) -> None:
            if not self._nic_ok(op, cqe):
                release()
                return
            self._poll(lambda: self._later(op, 0, check))

        def check() -> None:
            v1 = qp.scratch.read(h1, vlen)
            v2 = qp.scratch.read(h2, vlen)
            release()
            odd = all(_U32.unpack_from(v1, i)[0] % 2 for i in range(0, vlen, 4))
            lv2 = self._local_versions(op)
            ok = v1 == v2 and odd and lv2 == lv and all(v % 2 for v in lv)
            self.engine.log("ver_check", self.name, op.uid, wr.remote_key, rpages.start,
                            len(rpages), times[0], times[1], ok)
            cost = (len(rpages) + len(lv)) * self.lat.cpu_check_per_page
            self._later(op, cost, lambda: done(ok))

        def vread(h, i: int, cb) -> NicWqe:
            return NicWqe(Opcode.READ, h[0], h[1], vlen, vkey, voff, wr_id=self._nic_id(op),
                          on_remote_start=stamp(i), callback=cb)

        def mid(cqe) -> None:
            if not cqe.ok:
                self._nic_ok(op, cqe)

        if wr.opcode is NpOpcode.READ:
            data = NicWqe(Opcode.READ, t.write_key, wr.local_offset, wr.length, wr.remote_key,
                          wr.remote_offset, wr_id=self._nic_id(op), callback=mid)
        else:
            wkey = qp.keymap[wr.remote_key][0]
            data = NicWqe(Opcode.WRITE, t.read_key, wr.local_offset, wr.length, wkey,
                          wr.remote_offset, wr_id=self._nic_id(op), callback=mid)
        self._nic_post(qp, vread(h1, 0, mid))
        self._nic_post(qp, data)
        self._nic_post(qp, vread(h2, 1, last))

    # -- signature-checked Writes and batching ---------------------------

    def _sig_write(self, op: _Op, done: Callable[[bool], None], batched: bool) -> None:
        wr = op.wr
        qp = op.qp
        t = wr.local_mr
        payload = self.mem.peek(t.region, wr.local_offset, wr.length)
        entry = _BatchEntry(op, payload, self._local_versions(op), done)
        op.rtts += 1

        def written(cqe) -> None:
            if self._nic_ok(op, cqe):
                entry.written = True

        wkey = qp.keymap[wr.remote_key][0]
        self._nic_post(qp, NicWqe(Opcode.WRITE, t.read_key, wr.local_offset, wr.length, wkey,
                                  wr.remote_offset, signaled=False, wr_id=self._nic_id(op),
                                  callback=written))
        if not batched:
            self._flush_entries(qp, [entry])
            return
        qp.batch.append(entry)
        cfg = self.config
        if (wr.signaled or not cfg.batch_unsignaled or wr.order_after or wr.order_before
                or len(qp.batch) >= cfg.max_batch or qp.pending):
            self._flush_batch(qp)

    def _flush_batch(self, qp: NpQp) -> None:
        entries, qp.batch = qp.batch, []
        if entries:
            self._flush_entries(qp, entries)

    def _flush_entries(self, qp: NpQp, entries: list[_BatchEntry]) -> None:
        """Post coalesced auxiliary Reads covering every batched Write, then check all."""
        limit = self.config.coalesce_limit
        order = sorted(entries, key=lambda e: (e.op.wr.remote_key, e.op.wr.remote_offset, e.op.uid))
        spans: list[list] = []  # [key, start, end, entries]
        for e in order:
            w = e.op.wr
            s, end = w.remote_offset, w.remote_offset + w.length
            if spans:
                cur = spans[-1]
                if cur[0] == w.remote_key and s <= cur[2] and max(end, cur[2]) - cur[1] <= limit:
                    cur[2] = max(cur[2], end)
                    cur[3].append(e)
                    continue
            spans.append([w.remote_key, s, end, [e]])
        self._count("aux_reads", len(spans))
        self._count("batched_writes", len(entries))
        self.engine.log("batch_flush", self.name, qp.qp_num, len(entries), len(spans))
        handles = [qp.scratch.alloc(sp[2] - sp[1]) for sp in spans]
        left = [len(spans)]
        failed = [False]

        def landed(cqe) -> None:
            if not cqe.ok:
                failed[0] = True
                if not qp.errored:
                    st = cqe.status
                    self._poll(lambda: self._fail_qp(qp, st))
            left[0] -= 1
            if left[0] == 0:
                if failed[0]:
                    for h in handles:
                        qp.scratch.release(h)
                else:
                    self._poll(check)

        def check() -> None:
            for sp, h in zip(spans, handles):
                key, start, end, ents = sp
                rb = qp.scratch.read(h, end - start)
                qp.scratch.release(h)
                image = bytearray(end - start)
                for e in sorted(ents, key=lambda e: e.op.uid):
                    w = e.op.wr
                    image[w.remote_offset - start:w.remote_offset - start + w.length] = e.payload
                for e in ents:
                    if not self._live(e.op):
                        continue
                    w = e.op.wr
                    a = w.remote_offset - start
                    seg = rb[a:a + w.length]
                    clean = (e.written and seg == bytes(image[a:a + w.length])
                             and not signature_check(seg, w.remote_offset, self.nic.unit, self.magic)
                             and self._local_versions(e.op) == e.lv)
                    if not clean:
                        e.op.payload = bytes(image[a:a + w.length])
                    self.engine.log("sig_check", self.name, e.op.uid, clean)
                    cost = len(page_span(w.remote_offset, w.length)) * self.lat.cpu_check_per_page
                    self._later(e.op, cost, lambda e=e, clean=clean: e.done(clean))

        for sp, h in zip(spans, handles):
            self._nic_post(qp, NicWqe(Opcode.READ, h[0], h[1], sp[2] - sp[1], sp[0], sp[1],
                                      wr_id=sp[3][0].op.uid * 16, callback=landed))

    # -- two-sided handling, initiator side ------------------------------

    def _engage_two_sided(self, op: _Op) -> None:
        if not self._live(op):
            return
        op.redone = True
        self._count("redo")
        wr = op.wr
        self.engine.log("redo", self.name, op.qp.qp_num, op.uid, wr.length)
        if self.config.no_reverse_ops and wr.length > op.qp.inline_limit:
            self._rr_round(op)
        elif wr.length <= op.qp.inline_limit:
            if wr.opcode is NpOpcode.READ:
                self._inline_read(op)
            else:
                self._inline_write(op)
        else:
            self._reverse(op)

    def _expect(self, op: _Op, handler: Callable[[ControlMessage], None]) -> int:
        tag = op.qp.new_tag()

        def guarded(msg: ControlMessage) -> None:
            if self._live(op):
                handler(msg)

        op.qp.waiting[tag] = guarded
        return tag

    def _reply_status(self, msg: ControlMessage) -> Status:
        if msg.flags & Flag.RNR:
            return Status.RNR_ERR
        if msg.flags & Flag.ERROR:
            return Status.REM_ACCESS_ERR
        return Status.SUCCESS

    def _finish_reply(self, op: _Op, msg: ControlMessage) -> None:
        self._complete(op, self._reply_status(msg))

    def _imm_flags(self, op: _Op) -> Flag:
        return Flag.HAS_IMM if op.wr.opcode is NpOpcode.WRITE_IMM else Flag.NONE

    def _inline_read(self, op: _Op) -> None:
        wr = op.wr
        t = wr.local_mr
        op.path = "inline"
        op.rtts += 1

        def got(msg: ControlMessage) -> None:
            if msg.flags & Flag.ERROR:
                self._finish_reply(op, msg)
                return
            _, cost = self.mem.cpu_access(t.region, wr.local_offset, wr.length, True, msg.payload)
            cost += self.observe(t, page_span(wr.local_offset, wr.length))
            cost += self.lat.cpu_copy(wr.length)
            self._later(op, cost, lambda: self._complete(op, Status.SUCCESS))

        tag = self._expect(op, got)
        self._send_ctrl(op.qp, ControlMessage(MsgKind.REQUEST, WireOp.READ, Flag.NONE, tag,
                                              t.write_key, wr.local_offset, wr.remote_key,
                                              wr.remote_offset, wr.length))

    def _inline_write(self, op: _Op) -> None:
        wr = op.wr
        t = wr.local_mr
        op.path = "inline"
        data, cost = self.mem.cpu_access(t.region, wr.local_offset, wr.length)
        cost += self.observe(t, page_span(wr.local_offset, wr.length)) + self.lat.cpu_copy(wr.length)
        if op.payload is not None:
            data = op.payload

        def go() -> None:
            op.rtts += 1
            tag = self._expect(op, lambda msg: self._finish_reply(op, msg))
            self._send_ctrl(op.qp, ControlMessage(
                MsgKind.INLINE_WRITE_DATA, WireOp.WRITE, self._imm_flags(op), tag, t.read_key,
                wr.local_offset, wr.remote_key, wr.remote_offset, wr.length, wr.imm or 0, data))

        self._later(op, cost, go)

    def _pin_local(self, op: _Op) -> int:
        wr = op.wr
        t = wr.local_mr
        pages = page_span(wr.local_offset, wr.length)
        cost = self.mem.pin(t.region, pages.start, len(pages))
        op.pins.append((t.region, pages.start, len(pages)))
        return cost + self.observe(t, pages)

    def _reverse(self, op: _Op) -> None:
        wr = op.wr
        t = wr.local_mr
        op.path = "reverse"
        cost = self._pin_local(op)
        read = wr.opcode is NpOpcode.READ

        def go() -> None:
            op.rtts += 2
            tag = self._expect(op, lambda msg: self._finish_reply(op, msg))
            self._send_ctrl(op.qp, ControlMessage(
                MsgKind.REQUEST, WireOp.READ if read else WireOp.WRITE, self._imm_flags(op), tag,
                t.write_key if read else t.read_key, wr.local_offset, wr.remote_key,
                wr.remote_offset, wr.length, wr.imm or 0))

        self._later(op, cost, go)

    def _rr_round(self, op: _Op) -> None:
        wr = op.wr
        qp = op.qp
        op.path = "retry"
        op.rtts += 1
        read = wr.opcode is NpOpcode.READ
        tag_box = [0]

        def finished(clean: bool) -> None:
            tag = tag_box[0]
            if clean:
                self._send_ctrl(qp, ControlMessage(MsgKind.COMPLETION, tag=tag, flags=self._imm_flags(op),
                                                   length=wr.length, imm=wr.imm or 0))
                self._complete(op, Status.SUCCESS)
                return
            self._send_ctrl(qp, ControlMessage(MsgKind.COMPLETION, tag=tag, flags=Flag.ERROR))
            op.rounds += 1
            self._count("rr_retry")
            if op.rounds >= self.config.retry_limit:
                self._complete(op, Status.RETRY_EXC_ERR)
            else:
                self._rr_round(op)

        def ready(msg: ControlMessage) -> None:
            if msg.flags & Flag.ERROR:
                self._finish_reply(op, msg)
                return
            self._precheck(op, lambda: self._optimistic(op, finished, batched=False))

        tag_box[0] = self._expect(op, ready)
        self._send_ctrl(qp, ControlMessage(MsgKind.REQUEST, WireOp.READ if read else WireOp.WRITE,
                                           Flag.RETRY, tag_box[0], 0, wr.local_offset, wr.remote_key,
                                           wr.remote_offset, wr.length))

    # -- atomics, sends and write-with-immediate -------------------------

    def _atomic(self, op: _Op) -> None:
        if self._remote(op) is None:
            return
        wr = op.wr
        t = wr.local_mr
        op.path = "two_sided"
        op.rtts += 1

        def got(msg: ControlMessage) -> None:
            if msg.flags & Flag.ERROR:
                self._finish_reply(op, msg)
                return
            op.result = msg.payload
            _, cost = self.mem.cpu_access(t.region, wr.local_offset, 8, True, msg.payload)
            cost += self.observe(t, page_span(wr.local_offset, 8))
            self._later(op, cost, lambda: self._complete(op, Status.SUCCESS))

        tag = self._expect(op, got)
        kind = WireOp.CAS if wr.atomic is AtomicKind.CAS else WireOp.FAA
        payload = _U64.pack(wr.compare_add & _MASK64) + _U64.pack(wr.swap & _MASK64)
        self._send_ctrl(op.qp, ControlMessage(MsgKind.ATOMIC_REQUEST, kind, Flag.NONE, tag,
                                              t.write_key, wr.local_offset, wr.remote_key,
                                              wr.remote_offset, 8, 0, payload))

    def _send(self, op: _Op) -> None:
        wr = op.wr
        t = wr.local_mr
        cost = self._pin_local(op)
        if self.config.rendezvous_send:
            op.path = "rendezvous"

            def go() -> None:
                op.rtts += 2
                tag = self._expect(op, lambda msg: self._finish_reply(op, msg))
                self._send_ctrl(op.qp, ControlMessage(
                    MsgKind.REQUEST, WireOp.SEND, Flag.RENDEZVOUS, tag, t.read_key,
                    wr.local_offset, 0, 0, wr.length, wr.imm or 0))
        else:
            op.path = "pinned_send"

            def sent(cqe) -> None:
                if cqe.status is Status.RNR_ERR:
                    if not self._live(op):
                        return
                    op.rounds += 1
                    if op.rounds <= self.config.rnr_retry:
                        self._count("rnr_retry")
                        self._later(op, self.config.rnr_delay, go)
                    else:
                        self._poll(lambda: self._later(op, 0, lambda: self._complete(op, Status.RNR_ERR)))
                elif self._nic_ok(op, cqe):
                    self._poll(lambda: self._later(op, 0, lambda: self._complete(op, Status.SUCCESS)))

            def go() -> None:
                op.rtts += 1
                self._nic_post(op.qp, NicWqe(Opcode.SEND, t.read_key, wr.local_offset, wr.length,
                                             wr_id=self._nic_id(op), imm=wr.imm, callback=sent))

        self._later(op, cost, go)

    def _write_imm(self, op: _Op) -> None:
        if self._remote(op) is None:
            return
        wr = op.wr
        qp = op.qp
        t = wr.local_mr
        op.rtts += 1

        def written(cqe) -> None:
            self._nic_ok(op, cqe)

        def answered(msg: ControlMessage) -> None:
            if msg.flags & Flag.SUSPECT:
                op.payload = self.mem.peek(t.region, wr.local_offset, wr.length)
                self._engage_two_sided(op)
            else:
                self._finish_reply(op, msg)

        wkey = qp.keymap[wr.remote_key][0]
        self._nic_post(qp, NicWqe(Opcode.WRITE, t.read_key, wr.local_offset, wr.length, wkey,
                                  wr.remote_offset, signaled=False, wr_id=self._nic_id(op),
                                  callback=written))
        tag = self._expect(op, answered)
        self._send_ctrl(qp, ControlMessage(MsgKind.REQUEST, WireOp.WRITE_IMM, Flag.HAS_IMM, tag, t.read_key,
                                           wr.local_offset, wr.remote_key, wr.remote_offset, wr.length, wr.imm or 0))

    # -- receives --------------------------------------------------------

    def np_post_recv(self, qp: NpQp, wr: NpWorkRequest) -> None:
        if qp.destroyed or qp.errored:
            raise NotConnected("QP not usable")
        wr.opcode = NpOpcode.RECV
        self._validate(wr)
        recv = _NpRecv(wr, qp=qp)
        qp.recvs.append(recv)
        self.engine.log("np_post_recv", self.name, qp.qp_num, wr.wr_id, wr.length)
        if self.config.rendezvous_send:
            return
        t = wr.local_mr
        pages = page_span(wr.local_offset, wr.length)
        cost = self.mem.pin(t.region, pages.start, len(pages)) + self.observe(t, pages)
        recv.pinned = True
        recv.nic_wqe = NicWqe(Opcode.RECV, t.write_key, wr.local_offset, wr.length, wr_id=wr.wr_id,
                              callback=lambda cqe: self._nic_recv_done(qp, recv, cqe))
        when = max(self.engine.now() + cost, qp.recv_post_at)
        qp.recv_post_at = when

        def post() -> None:
            if recv in qp.recvs and not qp.errored and not qp.destroyed:
                self.nic.post_recv(qp.nic_qp, recv.nic_wqe)
                recv.nic_posted = True

        self.engine.at(when, post)

    def _unpin_recv(self, recv: _NpRecv) -> None:
        if recv.pinned:
            recv.pinned = False
            t = recv.wr.local_mr
            pages = page_span(recv.wr.local_offset, recv.wr.length)
            if t.region.alive:
                self.mem.unpin(t.region, pages.start, len(pages))

    def _nic_recv_done(self, qp: NpQp, recv: _NpRecv, cqe) -> None:
        if recv not in qp.recvs:
            return
        qp.recvs.remove(recv)
        self._poll(lambda: self._recv_done(qp, recv, cqe.status, cqe.byte_len, cqe.imm))

    def _recv_done(self, qp: NpQp, recv: _NpRecv, status: Status, n: int, imm: int | None) -> None:
        self._unpin_recv(recv)
        wr = recv.wr
        comp = Completion(wr.wr_id, status, NpOpcode.RECV, n, imm, qp.qp_num, self.engine.now())
        self.engine.log("np_cqe", self.name, qp.qp_num, 0, wr.wr_id, status.value, "recv", 0)
        for obs in self.observers:
            obs(comp, wr)
        qp.recv_cq.entries.append(comp)

    def _take_recv(self, qp: NpQp) -> _NpRecv | None:
        """Claim the oldest receive for an immediate or a rendezvous transfer."""
        nq = qp.nic_qp
        for recv in qp.recvs:
            if not recv.nic_posted:
                break
            # skip receives the NIC has already matched to an arriving send
            hit = next((r for r in nq.recvs if r.wqe is recv.nic_wqe), None)
            if hit is not None:
                nq.recvs.remove(hit)
                break
        else:
            return None
        qp.recvs.remove(recv)
        return recv

    # -- control dispatch and the target side ----------------------------

    def _on_control(self, qp: NpQp, msg: ControlMessage) -> None:
        if qp.destroyed or qp.errored:
            return
        self.engine.log("ctrl_recv", self.name, qp.qp_num, msg.kind.name, msg.tag, int(msg.flags))
        kind = msg.kind
        if kind is MsgKind.KEYMAP_SYNC:
            self._on_keymap(qp, msg)
        elif msg.flags & Flag.REPLY:
            handler = qp.waiting.pop(msg.tag, None)
            if handler is not None:
                handler(msg)
        elif kind is MsgKind.COMPLETION:
            self._t_release(qp, msg)
        elif kind is MsgKind.ATOMIC_REQUEST:
            self._t_atomic(qp, msg)
        elif kind is MsgKind.INLINE_WRITE_DATA:
            self._t_inline_write(qp, msg)
        elif kind is MsgKind.REQUEST:
            if msg.opcode is WireOp.SEND:
                self._t_rendezvous(qp, msg)
            elif msg.opcode is WireOp.WRITE_IMM:
                self._t_write_imm(qp, msg)
            elif msg.flags & Flag.RETRY:
                self._t_ready(qp, msg)
            elif msg.opcode is WireOp.READ and msg.length <= qp.inline_limit:
                self._t_inline_read(qp, msg)
            else:
                self._t_reverse(qp, msg)
        else:
            raise NpError(f"unexpected control message {kind.name}")

    def _reply(self, qp: NpQp, msg: ControlMessage, kind: MsgKind = MsgKind.COMPLETION,
               flags: Flag = Flag.NONE, payload: bytes = b"") -> None:
        length = len(payload) if kind is MsgKind.INLINE_READ_DATA else msg.length
        self._send_ctrl(qp, ControlMessage(kind, msg.opcode, flags | Flag.REPLY, msg.tag,
                                           msg.initiator_key, msg.initiator_offset, msg.target_key,
                                           msg.target_offset, length, msg.imm, payload))

    def _t_triple(self, qp: NpQp, msg: ControlMessage) -> MrTriple | None:
        t = self.triples.get(msg.target_key)
        if (t is None or not t.alive or msg.length < 1
                or msg.target_offset + msg.length > t.length):
            self._count("target_errors")
            self._reply(qp, msg, MsgKind.ATOMIC_REPLY if msg.kind is MsgKind.ATOMIC_REQUEST
                        else MsgKind.COMPLETION, Flag.ERROR,
                        bytes(8) if msg.kind is MsgKind.ATOMIC_REQUEST else b"")
            return None
        return t

    def _t_pin(self, qp: NpQp, key: int, t: MrTriple, offset: int, length: int, charge: bool) -> int:
        pages = page_span(offset, length)
        cost = self.mem.pin(t.region, pages.start, len(pages), charge)
        qp.target_pins.setdefault(key, []).append((t.region, pages.start, len(pages)))
        return cost + self.observe(t, pages)

    def _t_unpin(self, qp: NpQp, key: int) -> None:
        for region, first, n in qp.target_pins.pop(key, []):
            if region.alive:
                self.mem.unpin(region, first, n)

    def _t_later(self, qp: NpQp, delay: int, fn: Callable[[], None]) -> None:
        def run() -> None:
            if not qp.destroyed and not qp.errored:
                fn()
        self.engine.schedule(delay, run)

    def _t_inline_read(self, qp: NpQp, msg: ControlMessage) -> None:
        t = self._t_triple(qp, msg)
        if t is None:
            return
        key = -msg.tag
        cost = self._t_pin(qp, key, t, msg.target_offset, msg.length, False)
        cost += self.lat.cpu_copy(msg.length)
        self._count("inline")

        def go() -> None:
            data = self.mem.peek(t.region, msg.target_offset, msg.length)
            self._t_unpin(qp, key)
            self._reply(qp, msg, MsgKind.INLINE_READ_DATA, payload=data)

        self._t_later(qp, cost, go)

    def _t_inline_write(self, qp: NpQp, msg: ControlMessage) -> None:
        t = self._t_triple(qp, msg)
        if t is None:
            return
        key = -msg.tag
        cost = self._t_pin(qp, key, t, msg.target_offset, msg.length, False)
        cost += self.lat.cpu_copy(msg.length)
        self._count("inline")

        def go() -> None:
            if t.alive:
                self.mem.cpu_access(t.region, msg.target_offset, msg.length, True, msg.payload)
            self._t_unpin(qp, key)
            self._t_deliver_imm(qp, msg)

        self._t_later(qp, cost, go)

    def _t_deliver_imm(self, qp: NpQp, msg: ControlMessage) -> None:
        """Reply Completion, consuming a receive first when an immediate is carried."""
        if not msg.flags & Flag.HAS_IMM:
            self._reply(qp, msg)
            return
        recv = self._take_recv(qp)
        if recv is None:
            self._reply(qp, msg, flags=Flag.ERROR | Flag.RNR)
            return
        self._recv_done(qp, recv, Status.SUCCESS, msg.length, msg.imm)
        self._reply(qp, msg)

    def _t_reverse(self, qp: NpQp, msg: ControlMessage) -> None:
        t = self._t_triple(qp, msg)
        if t is None:
            return
        key = -msg.tag
        cost = self._t_pin(qp, key, t, msg.target_offset, msg.length, True)
        self._count("reverse")
        read = msg.opcode is WireOp.READ

        def landed(cqe) -> None:
            def fin() -> None:
                self._t_unpin(qp, key)
                if cqe.ok:
                    self._t_deliver_imm(qp, msg)
                elif not qp.errored:
                    self._fail_qp(qp, cqe.status)
            self._poll(fin)

        def go() -> None:
            if read:
                wqe = NicWqe(Opcode.WRITE, t.read_key, msg.target_offset, msg.length,
                             msg.initiator_key, msg.initiator_offset, callback=landed)
            else:
                wqe = NicWqe(Opcode.READ, t.write_key, msg.target_offset, msg.length,
                             msg.initiator_key, msg.initiator_offset, callback=landed)
            self.engine.log("reverse_op", self.name, qp.qp_num, msg.tag, wqe.opcode.value, msg.length)
            self._nic_post(qp, wqe)

        self._t_later(qp, cost, go)

    def _t_ready(self, qp: NpQp, msg: ControlMessage) -> None:
        t = self._t_triple(qp, msg)
        if t is None:
            return
        cost = self._t_pin(qp, -msg.tag, t, msg.target_offset, msg.length, True)
        self._count("receiver_ready")
        self._t_later(qp, cost, lambda: self._reply(qp, msg, MsgKind.RECEIVER_READY))

    def _t_release(self, qp: NpQp, msg: ControlMessage) -> None:
        self._t_unpin(qp, -msg.tag)
        if msg.flags & Flag.HAS_IMM and not msg.flags & Flag.ERROR:
            recv = self._take_recv(qp)
            if recv is not None:
                self._recv_done(qp, recv, Status.SUCCESS, msg.length, msg.imm)

    def _t_write_imm(self, qp: NpQp, msg: ControlMessage) -> None:
        t = self._t_triple(qp, msg)
        if t is None:
            return
        data = self.iommu.cpu_view(t.mr_id, msg.target_offset, msg.length)
        # a swapped source page carries the signature at its own page phase
        suspect = (signature_check(data, msg.target_offset, self.nic.unit, self.magic)
                   or signature_check(data, msg.initiator_offset, self.nic.unit, self.magic))
        cost = len(page_span(msg.target_offset, msg.length)) * self.lat.cpu_check_per_page

        def go() -> None:
            if suspect:
                self._reply(qp, msg, flags=Flag.SUSPECT)
            else:
                self._t_deliver_imm(qp, msg)

        self._t_later(qp, cost, go)

    def _t_atomic(self, qp: NpQp, msg: ControlMessage) -> None:
        t = self._t_triple(qp, msg)
        if t is None:
            return
        if msg.target_offset % 8 or msg.length != 8:
            self._reply(qp, msg, MsgKind.ATOMIC_REPLY, Flag.ERROR, bytes(8))
            return
        key = -msg.tag
        cost = self._t_pin(qp, key, t, msg.target_offset, 8, False)
        add_or_cmp, swap = _U64.unpack_from(msg.payload, 0)[0], _U64.unpack_from(msg.payload, 8)[0]

        def go() -> None:
            ident = (qp.peer.lib.name if qp.peer else "", qp.qp_num, msg.tag)
            self.atomic_exec[ident] = self.atomic_exec.get(ident, 0) + 1
            old = _U64.unpack(self.mem.peek(t.region, msg.target_offset, 8))[0]
            if msg.opcode is WireOp.FAA:
                new = (old + add_or_cmp) & _MASK64
            else:
                new = swap if old == add_or_cmp else old
            self.mem.cpu_access(t.region, msg.target_offset, 8, True, _U64.pack(new))
            self.engine.log("atomic_exec", self.name, t.mr_id, msg.target_offset, old, new)
            self._t_unpin(qp, key)
            self._reply(qp, msg, MsgKind.ATOMIC_REPLY, payload=_U64.pack(old))

        self._t_later(qp, cost, go)

    def _t_rendezvous(self, qp: NpQp, msg: ControlMessage) -> None:
        recv = self._take_recv(qp)
        if recv is None:
            self._reply(qp, msg, flags=Flag.ERROR | Flag.RNR)
            return
        wr = recv.wr
        if wr.length < msg.length:
            self._recv_done(qp, recv, Status.LOC_PROT_ERR, 0, None)
            self._reply(qp, msg, flags=Flag.ERROR)
            return
        t = wr.local_mr
        key = -msg.tag
        cost = self._t_pin(qp, key, t, wr.local_offset, msg.length, True)
        self._count("rendezvous")

        def landed(cqe) -> None:
            def fin() -> None:
                self._t_unpin(qp, key)
                if cqe.ok:
                    self._recv_done(qp, recv, Status.SUCCESS, msg.length, msg.imm or None)
                    self._reply(qp, msg)
                elif not qp.errored:
                    self._fail_qp(qp, cqe.status)
            self._poll(fin)

        def go() -> None:
            self.engine.log("reverse_op", self.name, qp.qp_num, msg.tag, "read", msg.length)
            self._nic_post(qp, NicWqe(Opcode.READ, t.write_key, wr.local_offset, msg.length,
                                      msg.initiator_key, msg.initiator_offset, callback=landed))

        self._t_later(qp, cost, go)


def pin_leaks(lib: NpRdma) -> dict[tuple[int, int], int]:
    """Pins held on application regions (library infrastructure excluded)."""
    return {k: v for k, v in lib.mem.pins.items() if k[0] not in lib.infra_rids}


def make_np_pair(latency=None, config: NpConfig | None = None, depth: int = 128, **host_kw):
    """Two hosts with a library each and one connected QP pair.

    Returns ``(engine, lib_a, lib_b, qp_a, qp_b)``.
    """
    from ..host import make_pair

    eng, ha, hb = make_pair(latency, **host_kw)
    a, b = NpRdma(ha, config), NpRdma(hb, config)
    qa, qb = a.np_create_qp(depth), b.np_create_qp(depth)
    a.np_connect(qa, qb)
    return eng, a, b, qa, qb
