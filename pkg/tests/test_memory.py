import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nprdma_sim.memory import (
    PAGE_SIZE, PRESENT, SWAPPED, UNALLOCATED, AddressSpaceExhausted, HostMemory, NotPresent,
    OutOfRange, SwapPinned, UnpinUnderflow,
)
from nprdma_sim.sim import Engine, LatencyModel

LAT = LatencyModel()


@pytest.fixture
def mem():
    return HostMemory(Engine(), LAT, "h")


def test_alloc_populated_and_lazy(mem):
    r = mem.alloc_region(1, populate=True)
    assert r.kind == [PRESENT]
    assert mem.peek(r, 0, PAGE_SIZE) == bytes(PAGE_SIZE)
    r4 = mem.alloc_region(4)
    assert r4.kind == [UNALLOCATED] * 4
    assert r4.base_va % PAGE_SIZE == 0
    assert r.base_va + r.length <= r4.base_va


def test_address_space_cap():
    m = HostMemory(Engine(), LAT, "h", max_pages=8)
    m.alloc_region(6)
    with pytest.raises(AddressSpaceExhausted):
        m.alloc_region(3)


def test_cpu_read_faults_only_touched_page(mem):
    r = mem.alloc_region(4)
    data, cost = mem.cpu_access(r, 2 * PAGE_SIZE, 1)
    assert data == b"\x00"
    assert cost == LAT.minor_fault
    assert r.kind == [UNALLOCATED, UNALLOCATED, PRESENT, UNALLOCATED]
    faults = mem.engine.records("fault")
    assert [(f[4], f[5]) for f in faults] == [(2, "minor")]


def test_present_read_is_free(mem):
    r = mem.alloc_region(1, populate=True)
    assert mem.cpu_access(r, 0, 4) == (bytes(4), 0)


def test_write_read_roundtrip(mem):
    r = mem.alloc_region(2, populate=True)
    mem.cpu_access(r, PAGE_SIZE - 4, 8, True, b"abcdefgh")
    assert mem.cpu_access(r, PAGE_SIZE - 4, 8)[0] == b"abcdefgh"


def test_out_of_range(mem):
    r = mem.alloc_region(1)
    with pytest.raises(OutOfRange):
        mem.cpu_access(r, PAGE_SIZE - 1, 2)
    with pytest.raises(ValueError):
        mem.cpu_access(r, 0, 2, True, b"x")


def test_read_spanning_swapped_and_present(mem):
    r = mem.alloc_region(2, populate=True)
    mem.cpu_access(r, 0, 2 * PAGE_SIZE, True, bytes(range(256)) * 32)
    mem.swap_out(r, 0)
    data, cost = mem.cpu_access(r, PAGE_SIZE - 10, 20)
    assert r.kind == [PRESENT, PRESENT]
    assert cost == LAT.major_fault
    assert data == (bytes(range(256)) * 32)[PAGE_SIZE - 10:PAGE_SIZE + 10]
    assert [f[5] for f in mem.engine.records("fault")] == ["major"]


def test_swap_out_pinned_refused(mem):
    r = mem.alloc_region(1, populate=True)
    mem.pin(r, 0, 1)
    with pytest.raises(SwapPinned):
        mem.swap_out(r, 0)
    assert r.kind == [PRESENT]


def test_swap_out_not_present(mem):
    r = mem.alloc_region(1)
    with pytest.raises(NotPresent):
        mem.swap_out(r, 0)


def test_swap_roundtrip_restores_bytes(mem):
    r = mem.alloc_region(1, populate=True)
    payload = random.Random(3).randbytes(PAGE_SIZE)
    mem.cpu_access(r, 0, PAGE_SIZE, True, payload)
    mem.swap_out(r, 0)
    assert r.kind == [SWAPPED]
    assert mem.peek(r, 0, PAGE_SIZE) == payload
    assert mem.cpu_access(r, 0, PAGE_SIZE)[0] == payload


def test_notifier_runs_once_before_swapped_state(mem):
    r = mem.alloc_region(1, populate=True)
    seen = []
    mem.register_notifier(r, lambda reg, page, pfn: seen.append(reg.kind[page]))
    mem.swap_out(r, 0)
    # the callback still saw the page as Present
    assert seen == [PRESENT]
    kinds = [rec[1] for rec in mem.engine.trace if rec[1] in ("notifier_call", "notifier_done", "swap_out")]
    assert kinds == ["notifier_call", "notifier_done", "swap_out"]


def test_frame_released_only_after_fence(mem):
    r = mem.alloc_region(1, populate=True)
    pfn = r.where[0]
    mem.register_notifier(r, lambda reg, page, f: mem.engine.now() + 700)
    mem.swap_out(r, 0)
    assert pfn in mem.frames.in_use
    mem.engine.run_until_idle()
    rel = [rec for rec in mem.engine.records("frame_release") if rec[3] == pfn]
    assert rel and rel[0][0] == 700


def test_swap_in_costs(mem):
    r = mem.alloc_region(2)
    pfn, cost = mem.swap_in(r, 0)
    assert cost == LAT.minor_fault
    assert mem.peek(r, 0, 8) == bytes(8)
    mem.cpu_access(r, 0, 3, True, b"xyz")
    mem.swap_out(r, 0)
    pfn2, cost = mem.swap_in(r, 0)
    assert cost == LAT.major_fault
    assert mem.peek(r, 0, 3) == b"xyz"
    assert mem.swap_in(r, 0) == (pfn2, 0)


def test_pin_twice_unpin_once(mem):
    r = mem.alloc_region(1, populate=True)
    mem.pin(r, 0, 1)
    mem.pin(r, 0, 1)
    mem.unpin(r, 0, 1)
    with pytest.raises(SwapPinned):
        mem.swap_out(r, 0)
    mem.unpin(r, 0, 1)
    mem.swap_out(r, 0)
    with pytest.raises(UnpinUnderflow):
        mem.unpin(r, 0, 1)


def test_pin_unallocated_charges_minor(mem):
    r = mem.alloc_region(1)
    cost = mem.pin(r, 0, 1, charge=False)
    assert cost == LAT.minor_fault
    assert r.kind == [PRESENT]
    assert mem.pin(r, 0, 1) == LAT.mr_pin_per_page


@given(st.lists(st.tuples(st.sampled_from(["pin", "unpin", "swap"]), st.integers(0, 2)),
                max_size=60))
@settings(max_examples=60, deadline=None)
def test_pin_sequence_against_counter_oracle(steps):
    m = HostMemory(Engine(), LAT, "h")
    r = m.alloc_region(3, populate=True)
    counts = [0, 0, 0]
    for op, p in steps:
        if op == "pin":
            m.pin(r, p, 1)
            counts[p] += 1
        elif op == "unpin":
            if counts[p]:
                m.unpin(r, p, 1)
                counts[p] -= 1
            else:
                with pytest.raises(UnpinUnderflow):
                    m.unpin(r, p, 1)
        else:
            if r.kind[p] != PRESENT:
                m.cpu_access(r, p * PAGE_SIZE, 1)
            assert m.try_swap_out(r, p) == (counts[p] == 0)
        assert all(m.pin_count(r, i) == counts[i] for i in range(3))


def test_notifier_counts(mem):
    r = mem.alloc_region(3, populate=True)
    calls_a, calls_b = [], []
    na = mem.register_notifier(r, lambda *a: calls_a.append(a[1]))
    mem.register_notifier(r, lambda *a: calls_b.append(a[1]))
    for p in range(3):
        mem.swap_out(r, p)
    assert calls_a == [0, 1, 2] and calls_b == [0, 1, 2]
    mem.deregister_notifier(na)
    mem.cpu_access(r, 0, 1)
    mem.swap_out(r, 0)
    assert calls_a == [0, 1, 2] and len(calls_b) == 4


@given(st.lists(st.tuples(st.sampled_from(["w", "r", "out", "in"]), st.integers(0, 3 * PAGE_SIZE - 1),
                          st.integers(1, 300), st.binary(min_size=1, max_size=1)), max_size=80))
@settings(max_examples=60, deadline=None)
def test_content_matches_flat_oracle(steps):
    m = HostMemory(Engine(), LAT, "h")
    r = m.alloc_region(3)
    model = bytearray(3 * PAGE_SIZE)
    minors = 0
    seen_present = set()
    for op, off, n, b in steps:
        n = min(n, 3 * PAGE_SIZE - off)
        if op == "w":
            m.cpu_access(r, off, n, True, b * n)
            model[off:off + n] = b * n
        elif op == "r":
            assert m.cpu_access(r, off, n)[0] == bytes(model[off:off + n])
        elif op == "out":
            p = off // PAGE_SIZE
            if r.kind[p] == PRESENT:
                m.swap_out(r, p)
        else:
            m.swap_in(r, off // PAGE_SIZE)
        for p in range(3):
            if r.kind[p] != UNALLOCATED and p not in seen_present:
                seen_present.add(p)
                minors += 1
    assert m.minor_faults == minors
    assert m.peek(r, 0, r.length) == bytes(model)


def test_discard_makes_next_touch_minor(mem):
    r = mem.alloc_region(1, populate=True)
    mem.cpu_access(r, 0, 2, True, b"hi")
    mem.discard(r, 0)
    assert r.kind == [UNALLOCATED]
    data, cost = mem.cpu_access(r, 0, 2)
    assert data == bytes(2) and cost == LAT.minor_fault


def test_swap_serialize_option():
    m = HostMemory(Engine(), LAT, "h", swap_serialize=True)
    assert m.fault_cost(0, 3) == 3 * LAT.major_fault
    m2 = HostMemory(Engine(), LAT, "h")
    assert m2.fault_cost(2, 3) == 2 * LAT.minor_fault + LAT.major_fault + 2 * LAT.swap_page_interval


def test_swap_out_all(mem):
    r = mem.alloc_region(4, populate=True)
    mem.pin(r, 1, 1)
    assert mem.swap_out_all(r) == 3
    assert r.kind == [SWAPPED, PRESENT, SWAPPED, SWAPPED]
