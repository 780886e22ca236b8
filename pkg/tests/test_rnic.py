import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nprdma_sim import make_pair
from nprdma_sim.iommu import MAGIC_WORD, MapKind
from nprdma_sim.memory import PAGE_SIZE
from nprdma_sim.rnic import MrKind, NicWqe, Opcode, QpNotReady, QpState, QueueFull, Status, split_units


class Pair:
    """Two hosts, one connected QP, a local pinned buffer and a remote MR."""

    def __init__(self, remote_kind=MrKind.PINNED, pages=2, depth=16, **kw):
        self.eng, self.a, self.b = make_pair(**kw)
        self.ra = self.a.mem.alloc_region(pages, populate=True)
        self.rb = self.b.mem.alloc_region(pages, populate=True)
        self.a.mem.pin(self.ra, 0, pages)
        self.la = self.a.nic.register_mr(self.ra, MrKind.PINNED)
        if remote_kind is MrKind.PINNED:
            self.b.mem.pin(self.rb, 0, pages)
            self.mr = self.b.nic.register_mr(self.rb, MrKind.PINNED)
        elif remote_kind is MrKind.ODP:
            self.mr = self.b.nic.register_mr(self.rb, MrKind.ODP)
        else:
            mr_id = self.b.nic.new_mr_id()
            kind = MapKind.READ if remote_kind is MrKind.READ else MapKind.WRITE
            self.b.iommu.create_map(mr_id, self.rb, kind)
            self.b.mem.register_notifier(self.rb, lambda r, p, f: self.b.iommu.on_swap_out(mr_id, p))
            self.mr = self.b.nic.register_mr(self.rb, remote_kind, mr_id)
        self.cq = self.a.nic.create_cq()
        self.qa = self.a.nic.create_qp(depth, self.cq)
        self.qb = self.b.nic.create_qp(depth, self.b.nic.create_cq())
        self.a.nic.connect(self.qa, self.qb)

    def post(self, op, lo, ro, n, **kw):
        self.a.nic.post_wqe(self.qa, NicWqe(op, self.la.key, lo, n, self.mr.key, ro, **kw))

    def run(self):
        self.eng.run_until_idle()
        return self.a.nic.poll_cq(self.cq)


def test_connect_and_state_checks():
    eng, a, b = make_pair()
    qa, qb = a.nic.create_qp(4), b.nic.create_qp(4)
    assert qa.state is QpState.INIT
    r = a.mem.alloc_region(1, populate=True)
    mr = a.nic.register_mr(r, MrKind.PINNED)
    with pytest.raises(QpNotReady):
        a.nic.post_wqe(qa, NicWqe(Opcode.WRITE, mr.key, 0, 1, mr.key, 0))
    a.nic.connect(qa, qb)
    assert qa.state is qb.state is QpState.RTS
    mr2 = a.nic.register_mr(r, MrKind.ODP)
    assert mr.key != mr2.key


def test_queue_full():
    p = Pair(depth=2)
    p.post(Opcode.WRITE, 0, 0, 8)
    p.post(Opcode.WRITE, 0, 8, 8)
    with pytest.raises(QueueFull):
        p.post(Opcode.WRITE, 0, 16, 8)


def test_read_two_bytes_timing_and_payload():
    p = Pair()
    p.b.mem.cpu_access(p.rb, 100, 2, True, b"hi")
    t0 = p.eng.now()
    p.post(Opcode.READ, 0, 100, 2, wr_id=5)
    (cqe,) = p.run()
    assert cqe.ok and cqe.wr_id == 5
    assert p.a.mem.peek(p.ra, 0, 2) == b"hi"
    lat = p.a.lat
    elapsed = cqe.completed_at - t0
    assert lat.link_rtt + lat.nic_wqe_process <= elapsed <= lat.link_rtt + 2 * lat.nic_wqe_process + 4 * lat.dma_per_unit


def test_write_into_blackhole_succeeds_silently():
    p = Pair(MrKind.WRITE)
    p.b.mem.cpu_access(p.rb, 0, 4, True, b"keep")
    p.b.mem.swap_out(p.rb, 0)
    p.a.mem.cpu_access(p.ra, 0, 256, True, b"x" * 256)
    p.post(Opcode.WRITE, 0, 0, 256)
    (cqe,) = p.run()
    assert cqe.ok
    assert p.b.mem.peek(p.rb, 0, 4) == b"keep"


def test_completion_order_is_post_order():
    p = Pair()
    for i, n in enumerate([3000, 8, 700]):
        p.post(Opcode.WRITE, 0, 0, n, wr_id=i)
    assert [c.wr_id for c in p.run()] == [0, 1, 2]


def test_split_units():
    assert len(split_units(0, 1024)) == 4
    assert split_units(100, 300) == [(100, 156), (256, 144)]
    assert split_units(PAGE_SIZE - 10, 20, 128) == [(PAGE_SIZE - 10, 10), (PAGE_SIZE, 10)]


def test_swap_between_units_gives_untorn_units():
    def setup():
        p = Pair(MrKind.READ)
        p.b.mem.cpu_access(p.rb, 0, 2 * PAGE_SIZE, True, b"\x11" * 2 * PAGE_SIZE)
        return p

    # dry run to learn when the second unit starts at the target
    dry = setup()
    dry.post(Opcode.READ, 0, PAGE_SIZE - 256, 512)
    dry.run()
    starts = [rec[5] for rec in dry.eng.records("dma_unit") if rec[2] == "b"]
    assert len(starts) == 2

    p = setup()
    p.eng.at(starts[1] - 1, lambda: p.b.mem.swap_out(p.rb, 1))
    p.post(Opcode.READ, 0, PAGE_SIZE - 256, 512)
    (cqe,) = p.run()
    assert cqe.ok
    got = p.a.mem.peek(p.ra, 0, 512)
    assert got[:256] == b"\x11" * 256
    assert got[256:] == MAGIC_WORD * 64


def test_poll_cq_signaled_and_unsignaled():
    p = Pair()
    assert p.run() == []
    p.post(Opcode.WRITE, 0, 0, 8, signaled=False)
    assert p.run() == []
    p.post(Opcode.WRITE, 0, 0, 8, wr_id=9)
    assert [c.wr_id for c in p.run()] == [9]


def test_unknown_remote_key_errors():
    p = Pair()
    p.a.nic.post_wqe(p.qa, NicWqe(Opcode.READ, p.la.key, 0, 8, 0xBAD, 0, wr_id=1))
    (cqe,) = p.run()
    assert cqe.status is Status.REM_ACCESS_ERR


def test_write_twice_is_idempotent():
    p = Pair()
    p.a.mem.cpu_access(p.ra, 0, 600, True, random.Random(1).randbytes(600))
    p.post(Opcode.WRITE, 0, 50, 600)
    p.run()
    first = p.b.mem.peek(p.rb, 0, p.rb.length)
    p.post(Opcode.WRITE, 0, 50, 600)
    p.run()
    assert p.b.mem.peek(p.rb, 0, p.rb.length) == first


@given(st.integers(0, 2 * PAGE_SIZE - 1), st.integers(1, 2 * PAGE_SIZE), st.integers(0, 2**32))
@settings(max_examples=40, deadline=None)
def test_read_payload_matches_oracle(off, n, seed):
    n = min(n, 2 * PAGE_SIZE - off)
    p = Pair()
    image = random.Random(seed).randbytes(2 * PAGE_SIZE)
    p.b.mem.cpu_access(p.rb, 0, len(image), True, image)
    p.post(Opcode.READ, 0, off, n)
    (cqe,) = p.run()
    assert cqe.ok and p.a.mem.peek(p.ra, 0, n) == image[off:off + n]


def test_atomics():
    p = Pair()
    p.b.mem.cpu_access(p.rb, 8, 8, True, (41).to_bytes(8, "little"))
    p.post(Opcode.FAA, 0, 8, 8, compare_add=1)
    p.post(Opcode.CAS, 16, 8, 8, compare_add=42, swap=7)
    assert all(c.ok for c in p.run())
    assert int.from_bytes(p.a.mem.peek(p.ra, 0, 8), "little") == 41
    assert int.from_bytes(p.a.mem.peek(p.ra, 16, 8), "little") == 42
    assert int.from_bytes(p.b.mem.peek(p.rb, 8, 8), "little") == 7


# -- ODP baseline -------------------------------------------------------------


def test_odp_minor_fault_waits_for_timeout():
    p = Pair(MrKind.ODP)
    p.b.mem.discard(p.rb, 0)
    t0 = p.eng.now()
    p.post(Opcode.READ, 0, 0, 2)
    (cqe,) = p.run()
    assert cqe.ok
    assert cqe.completed_at - t0 >= p.a.lat.odp_timeout
    assert p.a.nic.odp_retransmits == 1


def test_odp_without_fault_matches_pinned():
    pin, odp = Pair(), Pair(MrKind.ODP)
    pin.post(Opcode.READ, 0, 0, 2)
    odp.post(Opcode.READ, 0, 0, 2)
    assert pin.run()[0].completed_at == odp.run()[0].completed_at


def test_odp_fault_blocks_later_wqes():
    p = Pair(MrKind.ODP, pages=5)
    p.b.mem.discard(p.rb, 2)
    for k in range(5):
        p.post(Opcode.READ, k * 8, k * PAGE_SIZE, 8, wr_id=k)
    cqes = p.run()
    assert [c.wr_id for c in cqes] == [0, 1, 2, 3, 4]
    t_fault = cqes[2].completed_at
    assert t_fault >= p.a.lat.odp_timeout
    assert all(c.completed_at >= t_fault for c in cqes[3:])
