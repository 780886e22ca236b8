"""Commodity RDMA NIC model.

QPs execute WQEs strictly in post order. Data moves in page-anchored DMA
units (256 bytes by default); each unit translates its frame when it starts
and copies atomically, and swap events may fire between units. Two NICs are
joined by a fixed-delay pipe.
"""

from __future__ import annotations

import enum
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .iommu import Iommu, MapKind, UnknownMr
from .memory import PAGE_SIZE, PRESENT, HostMemory, VirtualRegion
from .sim import Engine, LatencyModel, SimError

DEFAULT_UNIT = 256


class Opcode(enum.Enum):
    READ = "read"
    WRITE = "write"
    SEND = "send"
    RECV = "recv"
    CAS = "cas"
    FAA = "faa"


class MrKind(enum.Enum):
    READ = "read"      # device reads go through the iommu Read map
    WRITE = "write"    # device writes go through the iommu Write map
    PINNED = "pinned"  # identity translation to resident, pinned frames
    ODP = "odp"        # NIC walks the host page table and faults on absence


class Status(enum.Enum):
    SUCCESS = "success"
    LOC_PROT_ERR = "local_protection_error"
    REM_ACCESS_ERR = "remote_access_error"
    RNR_ERR = "receive_not_posted"
    FLUSH_ERR = "flushed"
    RETRY_EXC_ERR = "retry_exceeded"


class QpState(enum.Enum):
    INIT = "init"
    RTS = "rts"
    ERROR = "error"


class NicError(SimError):
    pass


class QpNotReady(NicError):
    pass


class QueueFull(NicError):
    pass


class CapExceeded(NicError):
    pass


class InvalidRange(NicError):
    pass


@dataclass
class NicMr:
    key: int
    mr_id: int
    kind: MrKind
    region: VirtualRegion

    @property
    def length(self) -> int:
        return self.region.length


@dataclass
class NicWqe:
    opcode: Opcode
    local_key: int = 0
    local_offset: int = 0
    length: int = 0
    remote_key: int = 0
    remote_offset: int = 0
    signaled: bool = True
    wr_id: int = 0
    imm: int | None = None
    compare_add: int = 0
    swap: int = 0
    control: bytes | None = None
    on_remote_start: Callable[[int], None] | None = None
    callback: Callable[["Cqe"], None] | None = None


@dataclass
class Cqe:
    wr_id: int
    status: Status
    opcode: Opcode
    byte_len: int = 0
    qp_id: int = 0
    imm: int | None = None
    completed_at: int = 0

    @property
    def ok(self) -> bool:
        return self.status is Status.SUCCESS


class Cq:
    def __init__(self, cq_id: int, depth: int) -> None:
        self.cq_id = cq_id
        self.depth = depth
        self.entries: deque[Cqe] = deque()
        self.overflowed = False

    def push(self, cqe: Cqe) -> None:
        if len(self.entries) >= self.depth:
            self.overflowed = True
        self.entries.append(cqe)


@dataclass
class _Run:
    """One WQE's execution state."""

    qp: "NicQp"
    wqe: NicWqe
    seq: int
    gen: int = 0
    rseq: int = -1
    launched: bool = False
    done: bool = False
    status: Status = Status.SUCCESS
    byte_len: int = 0
    imm: int | None = None
    posted_at: int = 0


@dataclass
class _Recv:
    wqe: NicWqe


@dataclass
class NicQp:
    qp_id: int
    nic: "Rnic"
    depth: int
    cq: Cq | None = None
    recv_cq: Cq | None = None
    state: QpState = QpState.INIT
    peer: "NicQp | None" = None
    active: deque = field(default_factory=deque)
    recvs: deque = field(default_factory=deque)
    engine_free: int = 0
    next_seq: int = 0
    next_rseq: int = 0
    launched: dict = field(default_factory=dict)
    # responder side, for WQEs arriving from the peer
    resp_next: int = 0
    resp_pending: dict = field(default_factory=dict)
    resp_busy: bool = False
    resp_free: int = 0
    resp_last_write_end: int = -1
    control_handler: Callable[[bytes], None] | None = None
    # ODP head-of-line state
    odp_hold: _Run | None = None
    destroyed: bool = False


def split_units(offset: int, length: int, unit: int = DEFAULT_UNIT) -> list[tuple[int, int]]:
    """Split ``[offset, offset+length)`` at page-anchored unit boundaries."""
    out = []
    pos, end = offset, offset + length
    while pos < end:
        nxt = min((pos // unit + 1) * unit, end)
        out.append((pos, nxt - pos))
        pos = nxt
    return out


class Rnic:
    def __init__(self, engine: Engine, latency: LatencyModel, memory: HostMemory,
                 iommu: Iommu | None = None, name: str | None = None,
                 dma_unit_size: int = DEFAULT_UNIT, max_qps: int = 4096,
                 max_mrs: int = 1 << 16, index: int = 1) -> None:
        if PAGE_SIZE % dma_unit_size:
            raise ValueError("dma unit must divide the page size")
        self.engine = engine
        self.lat = latency
        self.mem = memory
        self.iommu = iommu
        self.index = index
        self.name = name or memory.host
        self.unit = dma_unit_size
        self.max_qps = max_qps
        self.max_mrs = max_mrs
        self.mrs: dict[int, NicMr] = {}
        self.qps: dict[int, NicQp] = {}
        self.cqs: dict[int, Cq] = {}
        self._next_key = 1
        self._next_mr_id = 1
        self._next_qp = 1
        self._next_cq = 1
        self.wqes_executed = 0
        self.odp_retransmits = 0

    # -- resources -------------------------------------------------------

    def create_cq(self, depth: int = 4096) -> Cq:
        cq = Cq(self._next_cq, depth)
        self._next_cq += 1
        self.cqs[cq.cq_id] = cq
        return cq

    def create_qp(self, depth: int, cq: Cq | None = None, recv_cq: Cq | None = None) -> NicQp:
        if len(self.qps) >= self.max_qps:
            raise CapExceeded("too many QPs")
        if depth < 1:
            raise ValueError("depth must be >= 1")
        qp = NicQp(self._next_qp, self, depth, cq, recv_cq or cq)
        self._next_qp += 1
        self.qps[qp.qp_id] = qp
        return qp

    def connect(self, qp: NicQp, peer: NicQp) -> None:
        qp.peer = peer
        peer.peer = qp
        qp.state = peer.state = QpState.RTS

    def register_mr(self, region: VirtualRegion, kind: MrKind, mr_id: int | None = None) -> NicMr:
        if len(self.mrs) >= self.max_mrs:
            raise CapExceeded("too many MRs")
        if mr_id is None:
            mr_id = self._next_mr_id
            self._next_mr_id += 1
        key = (self.index << 20) | self._next_key
        self._next_key += 1
        mr = NicMr(key, mr_id, kind, region)
        self.mrs[key] = mr
        return mr

    def new_mr_id(self) -> int:
        mr_id = self._next_mr_id
        self._next_mr_id += 1
        return mr_id

    def deregister_mr(self, key: int) -> None:
        self.mrs.pop(key, None)

    def destroy_qp(self, qp: NicQp) -> None:
        qp.destroyed = True
        qp.state = QpState.ERROR
        for run in list(qp.active):
            if not run.done:
                run.gen += 1
                run.done = True
                run.status = Status.FLUSH_ERR
        self._drain(qp)
        self._kick(qp)
        qp.recvs.clear()
        self.qps.pop(qp.qp_id, None)

    # -- posting ---------------------------------------------------------

    def post_wqe(self, qp: NicQp, wqe: NicWqe) -> None:
        if qp.state is not QpState.RTS:
            raise QpNotReady(f"qp {qp.qp_id} in state {qp.state.value}")
        if len(qp.active) >= qp.depth:
            raise QueueFull(f"qp {qp.qp_id} send queue full ({qp.depth})")
        if wqe.opcode is Opcode.RECV:
            raise ValueError("use post_recv")
        if wqe.control is None:
            if wqe.length < 1:
                raise InvalidRange("length must be >= 1")
            if wqe.opcode in (Opcode.CAS, Opcode.FAA) and wqe.length != 8:
                raise InvalidRange("atomics move 8 bytes")
            mr = self.mrs.get(wqe.local_key)
            if mr is None:
                raise InvalidRange(f"unknown local key {wqe.local_key:#x}")
            if wqe.local_offset < 0 or wqe.local_offset + wqe.length > mr.length:
                raise InvalidRange("local range outside MR")
        run = _Run(qp, wqe, qp.next_seq, posted_at=self.engine.now())
        qp.next_seq += 1
        qp.active.append(run)
        self.engine.log("wqe_post", self.name, qp.qp_id, run.seq, wqe.opcode.value, wqe.wr_id, wqe.length)
        if qp.odp_hold is None:
            self._launch(run)

    def post_recv(self, qp: NicQp, wqe: NicWqe) -> None:
        if qp.state is QpState.ERROR:
            raise QpNotReady("qp in error")
        mr = self.mrs.get(wqe.local_key)
        if mr is None or wqe.local_offset + wqe.length > mr.length:
            raise InvalidRange("bad receive buffer")
        wqe.opcode = Opcode.RECV
        qp.recvs.append(_Recv(wqe))

    def poll_cq(self, cq: Cq, max_entries: int | None = None) -> list[Cqe]:
        out = []
        while cq.entries and (max_entries is None or len(out) < max_entries):
            out.append(cq.entries.popleft())
        return out

    # -- execution -------------------------------------------------------

    def _tx_bytes(self, wqe: NicWqe) -> int:
        if wqe.control is not None:
            return len(wqe.control)
        if wqe.opcode in (Opcode.WRITE, Opcode.SEND):
            return wqe.length
        return 0

    def _launch(self, run: _Run) -> None:
        qp = run.qp
        run.launched = True
        run.rseq = qp.next_rseq
        qp.next_rseq += 1
        qp.launched[run.rseq] = (run, run.gen)
        t0 = max(self.engine.now(), qp.engine_free)
        qp.engine_free = t0 + self.lat.nic_wqe_process + self.lat.wire_time(self._tx_bytes(run.wqe))
        gen = run.gen
        self.engine.at(t0, lambda: self._start(run, gen), "wqe_start")

    def _alive(self, run: _Run, gen: int) -> bool:
        return run.gen == gen and not run.done and not run.qp.destroyed

    def _start(self, run: _Run, gen: int) -> None:
        if not self._alive(run, gen):
            return
        self.wqes_executed += 1
        wqe = run.wqe
        t0 = self.engine.now()
        proc = self.lat.nic_wqe_process
        half = self.lat.link_rtt // 2
        self.engine.log("wqe_start", self.name, run.qp.qp_id, run.seq, wqe.opcode.value, wqe.wr_id)
        if wqe.control is not None:
            payload = wqe.control
            arrive = t0 + proc + self.lat.wire_time(len(payload)) + half
            self._to_responder(run, gen, arrive, payload)
            return
        if wqe.opcode in (Opcode.WRITE, Opcode.SEND):
            mr = self.mrs.get(wqe.local_key)
            if mr is None:
                self._finish(run, gen, Status.LOC_PROT_ERR)
                return
            buf = bytearray(wqe.length)

            def gathered() -> None:
                depart = max(self.engine.now(), t0 + proc)
                arrive = depart + self.lat.wire_time(wqe.length) + half
                self._to_responder(run, gen, arrive, bytes(buf))

            self._chain(run, gen, self, mr, wqe.local_offset, wqe.length, buf, False, gathered)
        else:
            self._to_responder(run, gen, t0 + proc + half, None)

    # responder ordering: WQEs of one QP execute at the peer in post order
    def _to_responder(self, run: _Run, gen: int, arrive: int, payload: bytes | None) -> None:
        peer_qp = run.qp.peer
        self.engine.at(arrive, lambda: peer_qp.nic._arrive(peer_qp, run, gen, payload), "arrive")

    def _arrive(self, rqp: NicQp, run: _Run, gen: int, payload: bytes | None) -> None:
        if run.rseq >= rqp.resp_next:
            rqp.resp_pending[run.rseq] = (run, gen, payload)
        self._resp_pump(rqp)

    def _resp_pump(self, rqp: NicQp) -> None:
        if rqp.destroyed or rqp.peer is None:
            return
        launched = rqp.peer.launched
        init = rqp.peer.nic
        while not rqp.resp_busy:
            entry = launched.get(rqp.resp_next)
            if entry is None:
                return
            run, gen = entry
            if not init._alive(run, gen):
                launched.pop(rqp.resp_next, None)
                rqp.resp_pending.pop(rqp.resp_next, None)
                rqp.resp_next += 1
                continue
            got = rqp.resp_pending.get(rqp.resp_next)
            if got is None or got[1] != gen:
                return
            del rqp.resp_pending[rqp.resp_next]
            del launched[rqp.resp_next]
            rqp.resp_next += 1
            rqp.resp_busy = True
            self._respond(rqp, run, gen, got[2])

    def _kick(self, qp: NicQp) -> None:
        peer = qp.peer
        if peer is not None and not peer.destroyed:
            peer.nic._resp_pump(peer)

    def _resp_done(self, rqp: NicQp, was_write: bool) -> None:
        rqp.resp_busy = False
        rqp.resp_free = self.engine.now()
        if was_write:
            rqp.resp_last_write_end = self.engine.now()
        self._resp_pump(rqp)

    def _respond(self, rqp: NicQp, run: _Run, gen: int, payload: bytes | None) -> None:
        wqe = run.wqe
        init = run.qp.nic
        half = self.lat.link_rtt // 2
        now = self.engine.now()

        def ack(status: Status, delay: int = half, byte_len: int = 0) -> None:
            self.engine.schedule(delay, lambda: init._finish(run, gen, status, byte_len))

        if wqe.on_remote_start is not None and wqe.opcode is not Opcode.READ:
            wqe.on_remote_start(now)
        if wqe.control is not None:
            handler = rqp.control_handler
            self._resp_done(rqp, False)
            ack(Status.SUCCESS)
            if handler is not None:
                handler(payload)
            return

        if wqe.opcode is Opcode.SEND:
            if not rqp.recvs:
                self._resp_done(rqp, False)
                ack(Status.RNR_ERR)
                return
            recv = rqp.recvs.popleft().wqe
            mr = self.mrs.get(recv.local_key)
            if mr is None or recv.length < wqe.length:
                self._resp_done(rqp, False)
                self._recv_complete(rqp, recv, Status.LOC_PROT_ERR, 0, wqe.imm)
                ack(Status.REM_ACCESS_ERR)
                return
            buf = bytearray(payload)

            def placed() -> None:
                self._resp_done(rqp, True)
                self._recv_complete(rqp, recv, Status.SUCCESS, wqe.length, wqe.imm)
                ack(Status.SUCCESS, byte_len=wqe.length)

            self._chain(run, gen, self, mr, recv.local_offset, wqe.length, buf, True, placed,
                        on_abort=lambda: self._resp_done(rqp, False))
            return

        mr = self.mrs.get(wqe.remote_key)
        if mr is None or wqe.remote_offset < 0 or wqe.remote_offset + wqe.length > mr.length:
            self._resp_done(rqp, False)
            ack(Status.REM_ACCESS_ERR)
            return

        if wqe.opcode is Opcode.WRITE:
            buf = bytearray(payload)

            def written() -> None:
                self._resp_done(rqp, True)
                ack(Status.SUCCESS, byte_len=wqe.length)

            self._chain(run, gen, self, mr, wqe.remote_offset, wqe.length, buf, True, written,
                        on_abort=lambda: self._resp_done(rqp, False))
            return

        if wqe.opcode is Opcode.READ:
            gate = now
            if rqp.resp_last_write_end >= 0:
                gate = max(gate, rqp.resp_last_write_end + self.lat.write_read_pipeline_penalty)
            buf = bytearray(wqe.length)

            def gathered() -> None:
                self._resp_done(rqp, False)
                arrive = self.engine.now() + self.lat.wire_time(wqe.length) + half
                init_nic = init
                self.engine.at(arrive, lambda: init_nic._read_response(run, gen, bytes(buf)))

            def go() -> None:
                if not init._alive(run, gen):
                    self._resp_done(rqp, False)
                    return
                if wqe.on_remote_start is not None:
                    wqe.on_remote_start(self.engine.now())
                self._chain(run, gen, self, mr, wqe.remote_offset, wqe.length, buf, False, gathered,
                            on_abort=lambda: self._resp_done(rqp, False))

            if gate > now:
                self.engine.at(gate, go)
            else:
                go()
            return

        # atomics: one 8-byte unit, read-modify-write
        buf = bytearray(8)

        def fetched() -> None:
            old = struct.unpack("<Q", buf)[0]
            if wqe.opcode is Opcode.FAA:
                new = (old + wqe.compare_add) & 0xFFFFFFFFFFFFFFFF
            else:
                new = wqe.swap if old == wqe.compare_add else old
            nb = bytearray(struct.pack("<Q", new))

            def stored() -> None:
                self._resp_done(rqp, True)
                arrive = self.engine.now() + half
                self.engine.at(arrive, lambda: init._read_response(run, gen, bytes(buf)))

            self._chain(run, gen, self, mr, wqe.remote_offset, 8, nb, True, stored, 
                        on_abort=lambda: self._resp_done(rqp, False))

        self._chain(run, gen, self, mr, wqe.remote_offset, 8, buf, False, fetched,
                    on_abort=lambda: self._resp_done(rqp, False))

    def _recv_complete(self, rqp: NicQp, recv: NicWqe, status: Status, n: int, imm: int | None) -> None:
        cqe = Cqe(recv.wr_id, status, Opcode.RECV, n, rqp.qp_id, imm, self.engine.now())
        if recv.callback is not None:
            recv.callback(cqe)
        elif rqp.recv_cq is not None:
            rqp.recv_cq.push(cqe)

    def _read_response(self, run: _Run, gen: int, data: bytes) -> None:
        if not self._alive(run, gen):
            return
        wqe = run.wqe
        mr = self.mrs.get(wqe.local_key)
        if mr is None:
            self._finish(run, gen, Status.LOC_PROT_ERR)
            return
        n = len(data)
        self._chain(run, gen, self, mr, wqe.local_offset, n, bytearray(data), True,
                    lambda: self._finish(run, gen, Status.SUCCESS, n))

    # -- DMA unit chains -------------------------------------------------

    def _translate(self, mr: NicMr, page: int) -> int | None:
        if mr.kind is MrKind.READ:
            return self.iommu.translate(mr.mr_id, MapKind.READ, page)
        if mr.kind is MrKind.WRITE:
            return self.iommu.translate(mr.mr_id, MapKind.WRITE, page)
        region = mr.region
        if region.kind[page] == PRESENT:
            return region.where[page]
        if mr.kind is MrKind.PINNED:
            raise SimError(f"{self.name}: pinned MR {mr.key:#x} page {page} not resident")
        return None  # ODP fault

    def _chain(self, run: _Run, gen: int, nic: "Rnic", mr: NicMr, offset: int, length: int,
               buf: bytearray, write: bool, done: Callable[[], None],
               on_abort: Callable[[], None] | None = None) -> None:
        """Move ``length`` bytes between ``buf`` and MR memory unit by unit."""
        units = split_units(offset, length, self.unit)
        d = self.lat.dma_per_unit
        t_start = self.engine.now()
        eng = self.engine
        frames = self.mem.frames
        iommu = self.iommu
        owner = run.qp.nic
        state = {"i": 0}
        n = len(units)
        uses_map = mr.kind in (MrKind.READ, MrKind.WRITE)

        def step() -> None:
            if not owner._alive(run, gen) or (mr.key not in self.mrs):
                if on_abort:
                    on_abort()
                if owner._alive(run, gen):
                    owner._finish(run, gen, Status.REM_ACCESS_ERR if nic is not owner else Status.LOC_PROT_ERR)
                return
            now = eng.now()
            nxt = eng.next_time()
            i = state["i"]
            while i < n:
                s = t_start + i * d
                if s > now and nxt is not None and s >= nxt:
                    state["i"] = i
                    eng.at(s, step, "dma")
                    return
                pos, ln = units[i]
                page, in_off = divmod(pos, PAGE_SIZE)
                pfn = self._translate(mr, page)
                if pfn is None:
                    owner._odp_fault(run, gen, self, mr, page, on_abort)
                    return
                # extend the block over following units of the same page that
                # start before any other pending event
                j = i + 1
                while (j < n and units[j][0] // PAGE_SIZE == page
                       and (nxt is None or t_start + j * d < nxt)):
                    j += 1
                last_pos, last_len = units[j - 1]
                blk_len = last_pos + last_len - pos
                b0 = pos - offset
                if write:
                    frames.write(pfn, in_off, buf[b0:b0 + blk_len])
                else:
                    buf[b0:b0 + blk_len] = frames.read(pfn, in_off, blk_len)
                if uses_map:
                    iommu.note_unit(mr.mr_id, pfn, s, t_start + j * d, write, run.wqe.wr_id,
                                    owner.name)
                else:
                    eng.log("dma_unit", self.name, -mr.mr_id, pfn, s, t_start + j * d, write,
                            run.wqe.wr_id, owner.name)
                i = j
            state["i"] = n
            end = t_start + n * d
            if end > eng.now():
                eng.at(end, done, "dma_done")
            else:
                done()

        step()

    # -- ODP baseline ----------------------------------------------------

    def _odp_fault(self, run: _Run, gen: int, nic: "Rnic", mr: NicMr, page: int,
                   on_abort: Callable[[], None] | None) -> None:
        """Target or local page fault on an ODP MR: resolve, then retransmit after timeout."""
        qp = run.qp
        owner = qp.nic
        if on_abort:
            on_abort()
        cost = nic.mem.resolve(mr.region, [page])
        self.engine.log("odp_fault", nic.name, mr.key, page, cost)
        # drop the faulting WQE and everything behind it; replay after timeout
        hit = False
        for r in qp.active:
            if r is run:
                hit = True
            if hit and not r.done:
                r.gen += 1
                r.launched = False
        qp.odp_hold = run
        owner.odp_retransmits += 1
        retry_at = self.engine.now() + max(self.lat.odp_timeout, cost)
        qp.engine_free = max(qp.engine_free, retry_at)
        self.engine.at(retry_at, lambda: owner._launch(run) if not run.done else None, "odp_retx")
        owner._kick(qp)

    # -- completion ------------------------------------------------------

    def _finish(self, run: _Run, gen: int, status: Status, byte_len: int = 0) -> None:
        if not self._alive(run, gen):
            return
        run.done = True
        run.status = status
        run.byte_len = byte_len
        qp = run.qp
        if status not in (Status.SUCCESS, Status.RNR_ERR) and qp.state is QpState.RTS:
            qp.state = QpState.ERROR
            for r in qp.active:
                if not r.done and r is not run:
                    r.gen += 1
                    r.done = True
                    r.status = Status.FLUSH_ERR
            self._kick(qp)
        if qp.odp_hold is run:
            qp.odp_hold = None
            for r in qp.active:
                if not r.done and not r.launched:
                    self._launch(r)
        self._drain(qp)

    def _drain(self, qp: NicQp) -> None:
        now = self.engine.now()
        while qp.active and qp.active[0].done:
            run = qp.active.popleft()
            wqe = run.wqe
            cqe = Cqe(wqe.wr_id, run.status, wqe.opcode, run.byte_len, qp.qp_id, None, now)
            self.engine.log("cqe", self.name, qp.qp_id, run.seq, wqe.wr_id, run.status.value)
            if wqe.callback is not None:
                wqe.callback(cqe)
            elif (wqe.signaled or run.status is not Status.SUCCESS) and qp.cq is not None:
                qp.cq.push(cqe)


__all__ = [
    "Cq", "Cqe", "InvalidRange", "MrKind", "NicMr", "NicQp", "NicWqe", "Opcode", "QpNotReady",
    "QpState", "QueueFull", "Rnic", "Status", "UnknownMr", "split_units",
]
