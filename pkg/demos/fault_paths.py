"""Walk one Read through each fault path and print what it cost.

    python demos/fault_paths.py
"""

from nprdma_sim.memory import PAGE_SIZE
from nprdma_sim.nprdma import NpOpcode, NpWorkRequest, make_np_pair


def setup(pages=4):
    eng, a, b, qa, qb = make_np_pair()
    ra = a.mem.alloc_region(pages, populate=True)
    rb = b.mem.alloc_region(pages, populate=True)
    b.mem.cpu_access(rb, 0, pages * PAGE_SIZE, True, bytes(range(256)) * (pages * 16))
    ta, tb = a.np_register_mr(ra), b.np_register_mr(rb)
    # warm up: the first op exchanges MR keys
    a.np_post(qa, NpWorkRequest(NpOpcode.READ, ta, 0, 8, tb.read_key, 0))
    eng.run_until_idle()
    a.np_poll_cq(qa.cq)
    return eng, a, b, qa, ta, tb, rb


def read_once(n, prepare):
    eng, a, b, qa, ta, tb, rb = setup()
    prepare(b, rb)
    a.np_post(qa, NpWorkRequest(NpOpcode.READ, ta, 0, n, tb.read_key, 0))
    eng.run_until_idle()
    (c,) = a.np_poll_cq(qa.cq)
    ok = a.mem.peek(ta.region, 0, n) == b.mem.peek(rb, 0, n)
    return c.completed_at - c.posted_at, c.rtts, c.path, ok


CASES = [
    ("resident page", lambda b, r: None),
    ("minor fault", lambda b, r: b.mem.discard(r, 0)),
    ("major fault", lambda b, r: b.mem.swap_out(r, 0)),
]


def main() -> None:
    print(f"{'case':<14}{'size':>6}{'latency':>12}{'rtts':>6}  path        data ok")
    for n in (2, 1024, 2048):
        for label, prep in CASES:
            lat, rtts, path, ok = read_once(n, prep)
            print(f"{label:<14}{n:>6}{lat / 1000:>10.2f}us{rtts:>6}  {path:<12}{ok}")


if __name__ == "__main__":
    main()
