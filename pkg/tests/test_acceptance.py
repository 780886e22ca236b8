"""End-to-end acceptance checks, one test (or a few) per criterion.

Each test records a one-line detail; ``conftest.py`` prints a PASS/FAIL line
per criterion at the end of the run.
"""

import random
import time

import pytest

from nprdma_sim.bench import Fault, Kind, Mode, Scenario, Verb, fuzz_campaign, run_scenario
from nprdma_sim.memory import PAGE_SIZE, PRESENT
from nprdma_sim.nprdma import AtomicKind, NpOpcode, NpWorkRequest, make_np_pair, pin_leaks
from nprdma_sim.sim import MS

US = 1000
SIG = bytes.fromhex("deadbeef") * (PAGE_SIZE // 4)


def note(record_property, n, detail):
    record_property("criterion", n)
    record_property("detail", detail)


def rows(**kw):
    rep = run_scenario(Scenario(**kw), seed=3)
    assert rep.ok, rep.violations
    return {r.size: r for r in rep.rows}


class Rig:
    """Connected library pair with one registered region per side."""

    def __init__(self, pages=8, depth=64, **kw):
        self.eng, self.a, self.b, self.qa, self.qb = make_np_pair(depth=depth, **kw)
        self.ra = self.a.mem.alloc_region(pages, populate=True)
        self.rb = self.b.mem.alloc_region(pages, populate=True)
        self.image = random.Random(pages).randbytes(pages * PAGE_SIZE)
        self.b.mem.cpu_access(self.rb, 0, len(self.image), True, self.image)
        self.ta = self.a.np_register_mr(self.ra)
        self.tb = self.b.np_register_mr(self.rb)
        self.post(NpOpcode.READ, 0, 8, 0)
        self.run()

    def post(self, op, lo, n, ro, **kw):
        self.a.np_post(self.qa, NpWorkRequest(op, self.ta, lo, n, self.tb.read_key, ro, **kw))

    def run(self):
        self.eng.run_until_idle()
        return self.a.np_poll_cq(self.qa.cq)

    def clean(self):
        return not pin_leaks(self.a) and not pin_leaks(self.b)


def swappable(lib, regions):
    """Every unpinned resident page can be swapped out."""
    for r in regions:
        for p in range(r.num_pages):
            if r.kind[p] == PRESENT and not lib.mem.pin_count(r, p) and not lib.mem.try_swap_out(r, p):
                return False
    return True


# -- 1 -------------------------------------------------------------------------


def test_c1_oracle_equivalence(record_property):
    t0 = time.time()
    v = fuzz_campaign(7, 100, 100)
    took = time.time() - t0
    note(record_property, 1, f"{v.ops} WRs, {v.schedules} schedules, {v.redone} redone, "
                             f"{len(v.violations)} violations, {took:.0f}s")
    assert v.ops == 10_000 and v.schedules == 100
    assert v.ok, v.violations[:5]
    assert took < 120


def test_c1_swaps_forced_mid_dma(record_property):
    v = fuzz_campaign(21, 30, 100, forced_mid_dma=True)
    note(record_property, 1, f"mid-DMA swaps: {len(v.violations)} violations")
    assert v.ok, v.violations[:5]


def test_c1_oracle_catches_broken_flush(record_property):
    # sensitivity check: an IOMMU flush that ignores in-flight DMA must be detected
    v = fuzz_campaign(7, 30, 100, mutation="flush_ignores_inflight", forced_mid_dma=True)
    kinds = sorted({x.kind for x in v.violations})
    note(record_property, 1, f"broken flush caught: {kinds}")
    assert "dma_after_release" in kinds


# -- 2 -------------------------------------------------------------------------


@pytest.mark.parametrize("op", [NpOpcode.READ, NpOpcode.WRITE])
def test_c2_coincidence_costs_two_rtts(record_property, op):
    s = Rig(pages=8)
    sizes = [1100, 2048, 3000, 4096]
    for i, n in enumerate(sizes):
        if op is NpOpcode.READ:
            s.b.mem.cpu_access(s.rb, i * PAGE_SIZE, n, True, SIG[:n])
        else:
            s.a.mem.cpu_access(s.ra, i * PAGE_SIZE, n, True, SIG[:n])
    for i, n in enumerate(sizes):
        s.post(op, i * PAGE_SIZE, n, i * PAGE_SIZE, wr_id=i)
    cqes = sorted(s.run(), key=lambda c: c.wr_id)
    extra = [c.rtts - 1 for c in cqes]
    correct = all(s.a.mem.peek(s.ra, i * PAGE_SIZE, n) == s.b.mem.peek(s.rb, i * PAGE_SIZE, n) == SIG[:n]
                  for i, n in enumerate(sizes))
    note(record_property, 2, f"{op.value}: extra RTTs {extra}, all redone={all(c.redone for c in cqes)}")
    assert all(c.ok and c.redone for c in cqes)
    assert extra == [2] * len(sizes)
    assert correct and s.clean()


# -- 3 -------------------------------------------------------------------------


@pytest.mark.parametrize("verb", [Verb.READ, Verb.WRITE])
def test_c3_overhead_without_faults(record_property, verb):
    sizes = [2, 8, 64, 256, 1024, 2048, 4096, 8192]
    pin = rows(mode=Mode.PINNED, verb=verb, msg_sizes=sizes, iterations=20)
    np_ = rows(mode=Mode.NPRDMA, verb=verb, msg_sizes=sizes, iterations=20)
    extra = {n: np_[n].mean_ns - pin[n].mean_ns for n in sizes}
    note(record_property, 3, f"{verb.value} overhead {min(extra.values()):.0f}-{max(extra.values()):.0f} ns")
    assert all(0.1 * US <= e <= 2 * US for e in extra.values()), extra


# -- 4 -------------------------------------------------------------------------


def test_c4_minor_fault_small(record_property):
    out = {}
    for verb, want in ((Verb.READ, 3.5 * US), (Verb.WRITE, 5.7 * US)):
        pin = rows(mode=Mode.PINNED, verb=verb, msg_sizes=[2], iterations=20)[2]
        mf = rows(mode=Mode.NPRDMA, verb=verb, msg_sizes=[2], iterations=20, fault=Fault.MINOR)[2]
        out[verb] = (mf.mean_ns - pin.mean_ns, want)
    note(record_property, 4, "2B minor extra " + ", ".join(
        f"{v.value} {e / US:.2f}us (target {w / US:.1f})" for v, (e, w) in out.items()))
    for extra, want in out.values():
        assert 0.5 * want <= extra <= 1.5 * want


def test_c4_reverse_path_step(record_property):
    pin = rows(mode=Mode.PINNED, verb=Verb.READ, msg_sizes=[1024, 2048], iterations=20)
    mf = rows(mode=Mode.NPRDMA, verb=Verb.READ, msg_sizes=[1024, 2048], iterations=20, fault=Fault.MINOR)
    extra = {n: mf[n].mean_ns - pin[n].mean_ns for n in (1024, 2048)}
    rtts = {n: mf[n].rtts - 1 for n in (1024, 2048)}
    note(record_property, 4, f"1KB->2KB extra {extra[1024] / US:.1f}->{extra[2048] / US:.1f}us, "
                             f"extra RTTs {rtts[1024]:.0f}->{rtts[2048]:.0f}")
    assert rtts == {1024: 1, 2048: 2}
    assert extra[2048] > extra[1024]
    assert 5 * US <= extra[2048] <= 15 * US


# -- 5 -------------------------------------------------------------------------


def test_c5_major_fault_small(record_property):
    pin = rows(mode=Mode.PINNED, verb=Verb.READ, msg_sizes=[2], iterations=10)[2]
    mj = rows(mode=Mode.NPRDMA, verb=Verb.READ, msg_sizes=[2], iterations=10, fault=Fault.MAJOR)[2]
    extra = mj.mean_ns - pin.mean_ns
    note(record_property, 5, f"2B major read extra {extra / US:.1f}us (target 60)")
    assert 30 * US <= extra <= 90 * US


def test_c5_major_vs_minor_8mb(record_property):
    n = 8 << 20
    minor = rows(mode=Mode.NPRDMA, verb=Verb.READ, msg_sizes=[n], iterations=2, fault=Fault.MINOR)[n]
    major = rows(mode=Mode.NPRDMA, verb=Verb.READ, msg_sizes=[n], iterations=2, fault=Fault.MAJOR)[n]
    ratio = major.mean_ns / minor.mean_ns
    note(record_property, 5, f"8MB major/minor {ratio:.2f} (target 1.7)")
    assert 1.7 * 0.7 <= ratio <= 1.7 * 1.3


# -- 6 -------------------------------------------------------------------------


@pytest.mark.parametrize("timeout,floor", [(2 * MS, 100), (16 * MS, 500)])
def test_c6_faster_than_odp(record_property, timeout, floor):
    lat = {"odp_timeout": timeout}
    odp = rows(mode=Mode.ODP, verb=Verb.READ, msg_sizes=[2], iterations=3, fault=Fault.MINOR,
               latency_overrides=lat)[2]
    np_ = rows(mode=Mode.NPRDMA, verb=Verb.READ, msg_sizes=[2], iterations=10, fault=Fault.MINOR,
               latency_overrides=lat)[2]
    speedup = odp.mean_ns / np_.mean_ns
    note(record_property, 6, f"odp_timeout {timeout // MS}ms: {speedup:.0f}x")
    assert speedup >= floor


# -- 7 -------------------------------------------------------------------------

RANGE_PAGES = (0, 1)     # pages covered by the bracketed read
SCRIPTS = ["out", "in", "aba"]
WHEN = ["before", "between", "after"]


def _bracket_rig():
    s = Rig(pages=4)
    s.trace_start = len(s.eng.trace)
    return s


def _bracket_times():
    dry = _bracket_rig()
    dry.post(NpOpcode.READ, 0, 2 * PAGE_SIZE, 0)
    dry.run()
    return [rec[0] for rec in dry.eng.records("ver_read")][:2]


def _run_script(script, when, page, times):
    s = _bracket_rig()
    mem, lib = s.b.mem, s.b
    if script == "in":
        mem.swap_out(s.rb, page)
    at = {"before": times[0] - 1, "between": (times[0] + times[1]) // 2, "after": times[1] + 1}[when]

    def event():
        if script in ("out", "aba"):
            mem.swap_out(s.rb, page)
        if script in ("in", "aba"):
            lib.fault_in(s.tb, page)

    s.eng.at(at, event)
    s.post(NpOpcode.READ, 0, 2 * PAGE_SIZE, 0)
    (c,) = s.run()
    trace = s.eng.trace[s.trace_start:]
    reads = [i for i, r in enumerate(trace) if r[1] == "ver_read"][:2]
    check = next(r for r in trace if r[1] == "ver_check")
    # oracle from the event log alone: versions before the first read, transitions in between
    ver = {p: lib.version(s.tb, p) for p in RANGE_PAGES}
    events = [(i, r[4], r[5], r[6]) for i, r in enumerate(trace) if r[1] == "version" and r[3] == s.tb.mr_id]
    for i, p, old, new in reversed(events):
        if p in ver:
            ver[p] = old
    first = dict(ver)
    for i, p, old, new in events:
        if i < reads[0] and p in first:
            first[p] = new
    moved = [p for i, p, old, new in events if reads[0] < i < reads[1] and p in RANGE_PAGES]
    expect = not moved and all(v % 2 for v in first.values())
    data_ok = s.a.mem.peek(s.ra, 0, 2 * PAGE_SIZE) == s.image[:2 * PAGE_SIZE]
    aba_delta = None
    if script == "aba" and when == "between" and page in RANGE_PAGES:
        aba_delta = lib.version(s.tb, page) - first[page]
    return check[-1], expect, c.ok and data_ok, aba_delta, s.clean()


def test_c7_version_brackets(record_property):
    times = _bracket_times()
    bad = []
    n = 0
    aba = []
    for script in SCRIPTS:
        for when in WHEN:
            for page in (0, 1, 3):
                ok, expect, correct, delta, clean = _run_script(script, when, page, times)
                n += 1
                if ok != expect or not correct or not clean:
                    bad.append((script, when, page, ok, expect, correct))
                if delta is not None:
                    aba.append((ok, delta))
    note(record_property, 7, f"{n} scripted schedules, {len(bad)} disagreements, ABA caught "
                             f"{sum(not ok for ok, _ in aba)}/{len(aba)} with delta {[d for _, d in aba]}")
    assert not bad, bad
    assert aba and all(not ok and d == 2 for ok, d in aba)


# -- 8 -------------------------------------------------------------------------


def test_c8a_no_interleaving_over_fuzzed_schedules(record_property):
    v = fuzz_campaign(8, 1000, 10)
    order = [x for x in v.violations if x.kind == "ordering"]
    note(record_property, 8, f"{v.schedules} fuzzed schedules, {len(order)} overlap violations")
    assert v.schedules == 1000
    assert v.ok, v.violations[:5]


def test_c8b_no_head_of_line_blocking(record_property):
    s = Rig(pages=60, depth=64)
    s.b.mem.swap_out(s.rb, 0)
    s.post(NpOpcode.READ, 0, 2, 0, wr_id=0)
    for i in range(1, 51):
        s.post(NpOpcode.READ, i * PAGE_SIZE, 64, i * PAGE_SIZE, wr_id=i)
    cqes = {c.wr_id: c for c in s.run()}
    stalled = cqes[0]
    stall = stalled.completed_at - stalled.posted_at
    later = max(cqes[i].completed_at for i in range(1, 51))
    note(record_property, 8, f"stalled WR {stall / US:.0f}us, 50 relaxed WRs done "
                             f"{(stalled.completed_at - later) / US:.0f}us before it")
    assert all(c.ok for c in cqes.values()) and len(cqes) == 51
    assert stall >= 40 * US
    assert later < stalled.completed_at


@pytest.mark.parametrize("flag", ["order_after", "order_before"])
def test_c8c_flags_enforce_post_order(record_property, flag):
    def trial(flagged):
        s = Rig(pages=24, depth=64)
        rng = random.Random(5)
        for p in rng.sample(range(20), 8):
            s.b.mem.swap_out(s.rb, p)
        for i in range(20):
            op = NpOpcode.READ if i % 2 else NpOpcode.WRITE
            s.post(op, i * PAGE_SIZE, rng.choice([2, 64, 2048]), i * PAGE_SIZE, wr_id=i,
                   **({flag: True} if flagged else {}))
        return [c.wr_id for c in s.run()], s.clean()

    free, _ = trial(False)
    ordered, clean = trial(True)
    note(record_property, 8, f"{flag}: post order kept={ordered == list(range(20))} "
                             f"(unflagged reordered={free != list(range(20))})")
    assert ordered == list(range(20)) and clean
    assert free != list(range(20))


# -- 9 -------------------------------------------------------------------------


def test_c9_atomic_exactly_once(record_property):
    eng, a, b, qa, qb = make_np_pair(depth=32)
    # b reaches its own counter through a loopback connection
    q1, q2 = b.np_create_qp(32), b.np_create_qp(32)
    b.np_connect(q1, q2)
    counter = b.mem.alloc_region(1, populate=True)
    tc = b.np_register_mr(counter)
    res = {a: a.mem.alloc_region(2, populate=True), b: b.mem.alloc_region(2, populate=True)}
    tres = {lib: lib.np_register_mr(r) for lib, r in res.items()}
    rng = random.Random(9)
    plan = {a: [qa, 0, 0], b: [q1, 0, 0]}  # qp, posted, completed
    olds = []
    per_host = 500

    def on_done(lib):
        def f(comp, wr):
            if comp.opcode is NpOpcode.ATOMIC:
                assert comp.ok, comp
                plan[lib][2] += 1
                olds.append(int.from_bytes(lib.mem.peek(res[lib], wr.local_offset, 8), "little"))
        return f

    for lib in plan:
        lib.observers.append(on_done(lib))

    def drive(lib):
        qp, posted, done = plan[lib]
        while posted < per_host and posted - done < 16:
            lib.np_post(qp, NpWorkRequest(NpOpcode.ATOMIC, tres[lib], 8 * posted, 8, tc.read_key, 0,
                                          wr_id=posted, signaled=False, atomic=AtomicKind.FAA,
                                          compare_add=1))
            posted += 1
        plan[lib][1] = posted
        if done < per_host:
            eng.schedule(rng.randint(100, 3000), lambda: drive(lib))

    def adversary():
        if all(p[2] >= per_host for p in plan.values()):
            return
        lib, region = rng.choice([(b, counter), (a, res[a]), (b, res[b])])
        page = rng.randrange(region.num_pages)
        if region.kind[page] == PRESENT:
            lib.mem.try_swap_out(region, page)
        eng.schedule(rng.randint(200, 5000), adversary)

    for lib in plan:
        eng.schedule(0, lambda lib=lib: drive(lib))
    eng.schedule(50, adversary)
    eng.run_until_idle()
    final = int.from_bytes(b.mem.peek(counter, 0, 8), "little")
    once = all(v == 1 for v in b.atomic_exec.values()) and len(b.atomic_exec) == 2 * per_host
    note(record_property, 9, f"final counter {final}, distinct old values {len(set(olds))}, "
                             f"each executed once={once}")
    assert final == 2 * per_host
    assert sorted(olds) == list(range(2 * per_host))
    assert once


# -- 10 ------------------------------------------------------------------------


def test_c10_pin_hygiene_after_campaigns(record_property):
    v = fuzz_campaign(10, 20, 100)
    leaks = [x for x in v.violations if x.kind in ("pin_leak", "swap_refused")]
    s = Rig(pages=8)
    s.b.mem.swap_out(s.rb, 1)
    s.b.mem.swap_out(s.rb, 2)
    s.post(NpOpcode.READ, 0, 3000, PAGE_SIZE)
    s.post(NpOpcode.WRITE, 4 * PAGE_SIZE, 3000, 2 * PAGE_SIZE)
    s.b.np_post_recv(s.qb, NpWorkRequest(NpOpcode.RECV, s.tb, 5 * PAGE_SIZE, 4000))
    s.a.np_post(s.qa, NpWorkRequest(NpOpcode.SEND, s.ta, 0, 2000))
    s.run()
    clean = s.clean()
    swap_ok = swappable(s.a, [s.ra]) and swappable(s.b, [s.rb])
    note(record_property, 10, f"campaign pin/swap violations {len(leaks)}, scripted run pins clean={clean}, "
                              f"all pages swappable={swap_ok}")
    assert not leaks and clean and swap_ok


# -- 11 ------------------------------------------------------------------------


def test_c11_batching_throughput(record_property):
    kw = dict(kind=Kind.THROUGHPUT, msg_sizes=[64], iterations=2020)
    pin = rows(mode=Mode.PINNED, verb=Verb.WRITE, **kw)[64].ops_per_sec
    batched = rows(mode=Mode.NPRDMA, verb=Verb.WRITE, unsignaled_per_signaled=100, **kw)[64].ops_per_sec
    signaled = rows(mode=Mode.NPRDMA, verb=Verb.WRITE_SIGNALED, **kw)[64].ops_per_sec
    note(record_property, 11, f"64B writes: batched {batched / pin:.1%} of pinned, all-signaled {signaled / pin:.1%}")
    assert batched / pin >= 0.90
    assert 0.35 <= signaled / pin <= 0.65


# -- 12 ------------------------------------------------------------------------


def test_c12_registration_scaling(record_property):
    gb = 1 << 30
    rep = run_scenario(Scenario(kind=Kind.CONTROL_PLANE, msg_sizes=[gb // 4, gb]), seed=3)
    reg = {(r.mode, r.size): r.mean_ns for r in rep.rows if r.label == "create_mr"}
    speedup = reg[("pinned", gb)] / reg[("nprdma", gb)]
    pin_linear = reg[("pinned", gb)] / reg[("pinned", gb // 4)]
    note(record_property, 12, f"1GB: pinned {reg[('pinned', gb)] / MS:.0f}ms vs "
                              f"{reg[('nprdma', gb)] / MS:.0f}ms ({speedup:.0f}x); pinned 4x size -> {pin_linear:.2f}x")
    assert speedup >= 10
    assert 3.5 <= pin_linear <= 4.5
