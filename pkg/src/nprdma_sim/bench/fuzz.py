"""Randomized workloads under adversarial swapping, checked against a flat-memory oracle."""

from __future__ import annotations

import random
import struct
from collections import deque
from dataclasses import dataclass, field

from ..memory import PAGE_SIZE, PRESENT, SWAPPED, VirtualRegion
from ..nprdma import (AtomicKind, Completion, NpConfig, NpOpcode, NpRdma, NpWorkRequest,
                      make_np_pair, pin_leaks)
from ..sim import LatencyModel

_U64 = struct.Struct("<Q")
MAX_LEN = 8 << 20
REGION_PAGES = MAX_LEN // PAGE_SIZE + 2
SEND_MAX = 16 << 10
RECV_SLOTS = 32


@dataclass
class Violation:
    schedule: int
    seed: int
    kind: str
    detail: str


@dataclass
class Verdict:
    seed: int
    schedules: int = 0
    ops: int = 0
    completions: int = 0
    errors: int = 0
    redone: int = 0
    swaps: int = 0
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def schedule_seed(seed: int, index: int) -> int:
    return (seed * 1_000_003 + index * 7919) & 0xFFFFFFFF


def _size(rng: random.Random, big: float) -> int:
    r = rng.random()
    if r < big:
        return rng.randint(1 << 20, MAX_LEN)
    if r < 0.55:
        return rng.randint(2, 1024)
    if r < 0.85:
        return rng.randint(1025, 4096)
    return rng.randint(4097, 256 << 10)


class _Side:
    """One host's library, regions, oracle of its exposed region and expected receives."""

    def __init__(self, lib: NpRdma, qp) -> None:
        self.lib = lib
        self.qp = qp
        mem = lib.mem
        self.local = mem.alloc_region(REGION_PAGES)
        self.exposed = mem.alloc_region(REGION_PAGES)
        self.send_src = mem.alloc_region(SEND_MAX // PAGE_SIZE, populate=True)
        self.recv_buf = mem.alloc_region(RECV_SLOTS * SEND_MAX // PAGE_SIZE)
        self.t_local = lib.np_register_mr(self.local)
        self.t_exposed = lib.np_register_mr(self.exposed)
        self.t_send = lib.np_register_mr(self.send_src)
        self.t_recv = lib.np_register_mr(self.recv_buf)
        self.oracle = bytearray(self.exposed.length)
        self.expect_recv: deque[tuple[int, bytes, int | None]] = deque()
        self.recv_slot = 0
        self.posted = 0
        self.outstanding = 0
        self.inflight: dict[int, tuple[int, int]] = {}

    def regions(self) -> list[VirtualRegion]:
        return [self.local, self.exposed, self.send_src, self.recv_buf]


class _Schedule:
    def __init__(self, index: int, seed: int, num_wrs: int, verdict: Verdict,
                 mutation: str | None, forced_mid_dma: bool, big: float) -> None:
        self.index = index
        self.seed = seed
        self.rng = rng = random.Random(seed)
        self.verdict = verdict
        self.num_wrs = num_wrs
        self.big = big
        cfg = NpConfig()
        variant = rng.randrange(5)
        if variant == 1:
            cfg.no_reverse_ops = True
        elif variant == 2:
            cfg.version_threshold = rng.choice([256, 1024])
        elif variant == 3:
            cfg.rendezvous_send = True
        elif variant == 4:
            cfg.batch_unsignaled = False
        unit = 128 if rng.random() < 0.2 else 256
        self.eng, a, b, qa, qb = make_np_pair(LatencyModel(), cfg, depth=16, dma_unit_size=unit)
        self.eng.max_events = 20_000_000
        self.sides = [_Side(a, qa), _Side(b, qb)]
        self.peer = {0: 1, 1: 0}
        self.wrs: dict[tuple[int, int], tuple] = {}
        self.done = 0
        self.total = num_wrs
        self.forced = 0
        if mutation == "flush_ignores_inflight":
            for s in self.sides:
                s.lib.iommu.ignore_inflight_on_flush = True
        elif mutation is not None:
            raise ValueError(f"unknown mutation {mutation!r}")
        for i, s in enumerate(self.sides):
            s.lib.observers.append(lambda comp, wr, i=i: self._on_completion(i, comp, wr))
        if forced_mid_dma:
            self.eng.observers.append(self._force_mid_dma)
        self.active_pages: list[tuple[int, VirtualRegion, int]] = []

    def violation(self, kind: str, detail: str) -> None:
        self.verdict.violations.append(Violation(self.index, self.seed, kind, detail))

    # -- workload --------------------------------------------------------

    def _make_wr(self, i: int) -> NpWorkRequest:
        rng = self.rng
        me = self.sides[i]
        peer = self.sides[self.peer[i]]
        r = rng.random()
        wid = me.posted + 1 + 1_000_000 * i
        if r < 0.12:
            lo = rng.randrange(0, me.local.length - 8, 8)
            ro = rng.randrange(0, peer.exposed.length - 8, 8)
            if rng.random() < 0.5:
                return NpWorkRequest(NpOpcode.ATOMIC, me.t_local, lo, 8, peer.t_exposed.read_key, ro,
                                     wr_id=wid, atomic=AtomicKind.FAA, compare_add=rng.randrange(1, 1000))
            cur = _U64.unpack_from(peer.oracle, ro)[0]
            cmp = cur if rng.random() < 0.5 else cur + 1
            return NpWorkRequest(NpOpcode.ATOMIC, me.t_local, lo, 8, peer.t_exposed.read_key, ro,
                                 wr_id=wid, atomic=AtomicKind.CAS, compare_add=cmp,
                                 swap=rng.getrandbits(64))
        if r < 0.22 and len(peer.expect_recv) < RECV_SLOTS // 2:
            n = rng.randint(1, SEND_MAX)
            so = rng.randrange(0, SEND_MAX - n + 1)
            self._post_recv(peer, n)
            return NpWorkRequest(NpOpcode.SEND, me.t_send, so, n, wr_id=wid)
        n = _size(rng, self.big)
        lo = rng.randrange(0, me.local.length - n + 1)
        ro = rng.randrange(0, peer.exposed.length - n + 1)
        if rng.random() < 0.5:
            lo = min(lo - lo % PAGE_SIZE + rng.choice([0, lo % PAGE_SIZE]), me.local.length - n)
        op = NpOpcode.READ if rng.random() < 0.5 else NpOpcode.WRITE
        if op is NpOpcode.WRITE and rng.random() < 0.1 and len(peer.expect_recv) < RECV_SLOTS // 2:
            self._post_recv(peer, 0)
            imm = rng.getrandbits(32)
            return NpWorkRequest(NpOpcode.WRITE_IMM, me.t_local, lo, n, peer.t_exposed.read_key, ro,
                                 wr_id=wid, imm=imm)
        busy = any(a < lo + n and lo < b for a, b in me.inflight.values())
        if op is NpOpcode.WRITE and not busy:
            data = bytes(rng.getrandbits(8) for _ in range(min(n, 64)))
            data = (data * (n // len(data) + 1))[:n]
            if rng.random() < 0.03:
                data = (bytes.fromhex("deadbeef") * (n // 4 + 1))[:n]
            me.lib.mem.cpu_access(me.local, lo, n, True, data)
        signaled = rng.random() < 0.7
        return NpWorkRequest(op, me.t_local, lo, n, peer.t_exposed.read_key, ro, wr_id=wid,
                             signaled=signaled, order_before=rng.random() < 0.03,
                             order_after=rng.random() < 0.03)

    def _post_recv(self, side: _Side, n: int) -> None:
        slot = side.recv_slot % RECV_SLOTS
        side.recv_slot += 1
        wr = NpWorkRequest(NpOpcode.RECV, side.t_recv, slot * SEND_MAX, SEND_MAX,
                           wr_id=900_000_000 + side.recv_slot)
        side.lib.np_post_recv(side.qp, wr)

    def _drive(self, i: int) -> None:
        me = self.sides[i]
        quota = self.total // 2 + (self.total % 2 if i == 0 else 0)
        if me.posted < quota and me.outstanding < 12 and not me.qp.errored:
            wr = self._make_wr(i)
            if wr.opcode is NpOpcode.SEND:
                peer = self.sides[self.peer[i]]
                peer.expect_recv.append((wr.length, me.lib.mem.peek(me.send_src, wr.local_offset,
                                                                      wr.length), None))
            elif wr.opcode is NpOpcode.WRITE_IMM:
                peer = self.sides[self.peer[i]]
                peer.expect_recv.append((wr.length, b"", wr.imm))
            me.posted += 1
            me.outstanding += 1
            if wr.opcode is not NpOpcode.SEND:
                me.inflight[wr.wr_id] = (wr.local_offset, wr.local_offset + wr.length)
            self.wrs[(i, wr.wr_id)] = (wr.opcode, wr.local_offset, wr.length, wr.remote_offset)
            self._note_active(i, wr)
            me.lib.np_post(me.qp, wr)
            self.verdict.ops += 1
        me.lib.np_poll_cq(me.qp.cq)
        if self._busy():
            self.eng.schedule(self.rng.randint(50, 2500), lambda: self._drive(i))

    def _note_active(self, i: int, wr: NpWorkRequest) -> None:
        me = self.sides[i]
        peer = self.sides[self.peer[i]]
        if wr.opcode is NpOpcode.SEND:
            return
        for side, region, off in ((me, me.local, wr.local_offset), (peer, peer.exposed, wr.remote_offset)):
            first = off // PAGE_SIZE
            last = (off + wr.length - 1) // PAGE_SIZE
            self.active_pages.append((self.sides.index(side), region, self.rng.randint(first, last)))
        del self.active_pages[:-64]

    def _busy(self) -> bool:
        return any(s.outstanding for s in self.sides) or any(
            s.posted < (self.total + 1) // 2 for s in self.sides)

    # -- adversary -------------------------------------------------------

    def _adversary(self) -> None:
        rng = self.rng
        if not self._busy():
            return
        if self.active_pages and rng.random() < 0.75:
            si, region, page = rng.choice(self.active_pages)
        else:
            si = rng.randrange(2)
            side = self.sides[si]
            region = rng.choice([side.local, side.exposed, side.recv_buf])
            page = rng.randrange(region.num_pages)
        mem = self.sides[si].lib.mem
        if region.kind[page] == PRESENT:
            if mem.try_swap_out(region, page):
                self.verdict.swaps += 1
        elif region.kind[page] == SWAPPED and rng.random() < 0.5:
            mem.cpu_access(region, page * PAGE_SIZE, 4)
        self.eng.schedule(rng.randint(100, 4000), self._adversary)

    def _force_mid_dma(self, rec: tuple) -> None:
        if rec[1] != "dma_unit" or self.forced >= 40:
            return
        now, _, host, mr_id, pfn, start, end = rec[:7]
        if mr_id <= 0 or end <= now + 1:
            return
        side = self.sides[0] if host == self.sides[0].lib.name else self.sides[1]
        for region in (side.local, side.exposed, side.recv_buf):
            for p in range(region.num_pages):
                if region.where[p] == pfn and region.kind[p] == PRESENT:
                    self.forced += 1
                    mem = side.lib.mem
                    self.eng.schedule(1, lambda r=region, p=p: mem.try_swap_out(r, p))
                    return

    # -- oracle ----------------------------------------------------------

    def _on_completion(self, i: int, comp: Completion, wr: NpWorkRequest) -> None:
        me = self.sides[i]
        self.verdict.completions += 1
        if comp.redone:
            self.verdict.redone += 1
        if comp.opcode is NpOpcode.RECV:
            self._check_recv(i, comp)
            return
        me.outstanding -= 1
        me.inflight.pop(wr.wr_id, None)
        peer = self.sides[self.peer[i]]
        mem, pmem = me.lib.mem, peer.lib.mem
        n, lo, ro = wr.length, wr.local_offset, wr.remote_offset
        if not comp.ok:
            self.verdict.errors += 1
            if wr.opcode in (NpOpcode.SEND, NpOpcode.WRITE_IMM):
                payload = mem.peek(me.send_src, lo, n) if wr.opcode is NpOpcode.SEND else b""
                want = (n, payload, wr.imm if wr.opcode is NpOpcode.WRITE_IMM else None)
                if want in peer.expect_recv:
                    peer.expect_recv.remove(want)
            if wr.opcode in (NpOpcode.WRITE, NpOpcode.WRITE_IMM, NpOpcode.ATOMIC):
                peer.oracle[ro:ro + n] = pmem.peek(peer.exposed, ro, n)
            return
        if wr.opcode is NpOpcode.READ:
            got = mem.peek(me.local, lo, n)
            if got != bytes(peer.oracle[ro:ro + n]):
                self.violation("read_mismatch", f"host {i} wr {wr.wr_id} len {n} path {comp.path}")
        elif wr.opcode in (NpOpcode.WRITE, NpOpcode.WRITE_IMM):
            payload = mem.peek(me.local, lo, n)
            if pmem.peek(peer.exposed, ro, n) != payload:
                self.violation("write_mismatch", f"host {i} wr {wr.wr_id} len {n} path {comp.path}")
            peer.oracle[ro:ro + n] = payload
        elif wr.opcode is NpOpcode.ATOMIC:
            before = _U64.unpack_from(peer.oracle, ro)[0]
            old = _U64.unpack(mem.peek(me.local, lo, 8))[0]
            if wr.atomic is AtomicKind.FAA:
                after = (before + wr.compare_add) & ((1 << 64) - 1)
            else:
                after = wr.swap if before == wr.compare_add else before
            now = _U64.unpack(pmem.peek(peer.exposed, ro, 8))[0]
            if old != before or now != after:
                self.violation("atomic_mismatch", f"host {i} wr {wr.wr_id}: old {old} expected {before}")
            _U64.pack_into(peer.oracle, ro, after)

    def _check_recv(self, i: int, comp: Completion) -> None:
        me = self.sides[i]
        if not comp.ok:
            return
        if not me.expect_recv:
            self.violation("recv_unexpected", f"host {i} wr {comp.wr_id}")
            return
        slot_off = ((comp.wr_id - 900_000_001) % RECV_SLOTS) * SEND_MAX
        # relaxed ordering lets sends overtake each other, so match by content
        for k, (n, payload, imm) in enumerate(me.expect_recv):
            if comp.byte_len != n or comp.imm != imm:
                continue
            if imm is None and me.lib.mem.peek(me.recv_buf, slot_off, n) != payload:
                continue
            del me.expect_recv[k]
            return
        self.violation("recv_mismatch", f"host {i} wr {comp.wr_id} len {comp.byte_len} imm {comp.imm}")

    # -- run and post-mortem ---------------------------------------------

    def run(self) -> None:
        for i in range(2):
            self.eng.schedule(self.rng.randint(0, 500), lambda i=i: self._drive(i))
        self.eng.schedule(self.rng.randint(0, 2000), self._adversary)
        self.eng.run_until_idle()
        self._post_mortem()

    def _post_mortem(self) -> None:
        for i, s in enumerate(self.sides):
            if s.expect_recv:
                self.violation("recv_missing", f"host {i}: {len(s.expect_recv)} receives never completed")
            s.lib.np_destroy_qp(s.qp)
        for i, s in enumerate(self.sides):
            if s.outstanding:
                self.violation("stuck", f"host {i}: {s.outstanding} WRs never completed")
            leaks = pin_leaks(s.lib)
            if leaks:
                self.violation("pin_leak", f"host {i}: {sorted(leaks.items())[:4]}")
            if any(s.lib.atomic_exec.get(k) != 1 for k in s.lib.atomic_exec):
                self.violation("atomic_not_once", f"host {i}")
            if s.lib.mem.peek(s.exposed, 0, s.exposed.length) != bytes(s.oracle):
                self.violation("final_state", f"host {i}: exposed region differs from oracle")
        self._check_trace()
        for s in self.sides:
            for region in s.regions():
                for p in range(region.num_pages):
                    if region.kind[p] == PRESENT and not s.lib.mem.pin_count(region, p):
                        if not s.lib.mem.try_swap_out(region, p):
                            self.violation("swap_refused", f"{s.lib.name} rid {region.rid} page {p}")

    def _check_trace(self) -> None:
        specials = {s.lib.name: (s.lib.iommu.special.signature_pfn, s.lib.iommu.special.blackhole_pfn)
                    for s in self.sides}
        by_key = {}
        for s in self.sides:
            for t in s.lib.triples.values():
                by_key[t.read_key] = (s.lib.name, t.mr_id)
        busy: dict[tuple[str, int], int] = {}
        special_uids: set[tuple[str, int]] = set()
        ver_reads: dict[tuple[str, int], list[int]] = {}
        version_events: list[tuple[int, str, int, int]] = []
        ok_checks = []
        cqes = {}
        admits: dict[tuple[str, int, int], int] = {}
        posts: dict[tuple[str, int], int] = {}
        spans: dict[tuple[str, int], tuple[int, int]] = {}
        names = [s.lib.name for s in self.sides]
        for idx, rec in enumerate(self.eng.trace):
            kind = rec[1]
            if kind == "dma_unit":
                _, _, host, mr_id, pfn, start, end, write, wr_id, initiator = rec
                key = (host, pfn)
                if end > busy.get(key, 0):
                    busy[key] = end
                if pfn in specials[host] and wr_id % 16:
                    special_uids.add((initiator, wr_id // 16))
            elif kind == "frame_release":
                t, _, host, pfn = rec
                if busy.get((host, pfn), 0) > t:
                    self.violation("dma_after_release", f"{host} pfn {pfn} released at {t} "
                                                        f"with DMA until {busy[(host, pfn)]}")
                busy.pop((host, pfn), None)
            elif kind == "ver_read":
                ver_reads.setdefault((rec[2], rec[3]), []).append(idx)
            elif kind == "version":
                version_events.append((idx, rec[2], rec[3], rec[4]))
            elif kind == "ver_check" and rec[-1]:
                ok_checks.append(rec)
            elif kind == "np_cqe" and rec[7] != "recv":
                cqes[(rec[2], rec[4])] = (rec[6], rec[7], idx)
            elif kind == "np_admit":
                admits[(rec[2], rec[4])] = idx
            elif kind == "np_post":
                posts[(rec[2], rec[4])] = rec[5]
        for rec in ok_checks:
            _, _, host, uid, rkey, first, n, _t1, _t2, _ok = rec
            reads = ver_reads.get((host, uid), [])
            if len(reads) < 2:
                continue
            lo, hi = reads[-2], reads[-1]
            thost, mr_id = by_key.get(rkey, (None, None))
            for idx, vhost, vmr, page in version_events:
                if lo < idx < hi and vhost == thost and vmr == mr_id and first <= page < first + n:
                    self.violation("version_discipline", f"uid {uid}: page {page} changed between reads")
                    break
        for (host, uid), (status, path, _) in cqes.items():
            if status == "success" and path == "optimistic" and (host, uid) in special_uids:
                self.violation("special_frame_success", f"{host} uid {uid}")
        self._check_ordering(admits, cqes, posts)

    def _check_ordering(self, admits: dict, cqes: dict, posts: dict) -> None:
        per_host: dict[str, list] = {}
        names = [s.lib.name for s in self.sides]
        for (host, uid), wr_id in posts.items():
            i = names.index(host)
            info = self.wrs.get((i, wr_id))
            if info is None or (host, uid) not in admits or (host, uid) not in cqes:
                continue
            opcode, lo, n, ro = info
            if opcode is NpOpcode.SEND:
                continue
            lw = opcode in (NpOpcode.READ, NpOpcode.ATOMIC)
            rw = opcode is not NpOpcode.READ
            per_host.setdefault(host, []).append((admits[(host, uid)], cqes[(host, uid)][2],
                                                  lo, lo + n, lw, ro, ro + (8 if opcode is NpOpcode.ATOMIC else n), rw, uid))
        for host, ops in per_host.items():
            ops.sort()
            for a_i in range(len(ops)):
                a = ops[a_i]
                for b in ops[a_i + 1:]:
                    if b[0] >= a[1]:
                        continue
                    local = a[2] < b[3] and b[2] < a[3] and (a[4] or b[4])
                    remote = a[5] < b[6] and b[5] < a[6] and (a[7] or b[7])
                    if local or remote:
                        self.violation("ordering", f"{host}: uids {a[8]} and {b[8]} overlap in time")


def fuzz_campaign(seed: int, num_schedules: int, wrs_per_schedule: int = 100,
                  mutation: str | None = None, forced_mid_dma: bool = False,
                  big_fraction: float = 0.02) -> Verdict:
    """Run ``num_schedules`` random schedules; every violation carries its replay seed."""
    verdict = Verdict(seed)
    for k in range(num_schedules):
        s = _Schedule(k, schedule_seed(seed, k), wrs_per_schedule, verdict, mutation,
                      forced_mid_dma, big_fraction)
        s.run()
        verdict.schedules += 1
    return verdict
