"""Randomized workloads under adversarial swapping, then the same with a planted bug.

    python demos/soundness_campaign.py --schedules 10
"""

import argparse

from nprdma_sim.bench import fuzz_campaign


def show(label: str, v) -> None:
    kinds = sorted({x.kind for x in v.violations})
    print(f"{label:<24} {v.ops:>6} WRs  {v.swaps:>5} swaps  {v.redone:>5} redone  "
          f"{len(v.violations)} violations {kinds}")
    for x in v.violations[:3]:
        print(f"    replay seed {x.seed}: {x.kind} {x.detail}")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--schedules", type=int, default=10)
    p.add_argument("--wrs", type=int, default=100)
    args = p.parse_args()
    show("sound", fuzz_campaign(args.seed, args.schedules, args.wrs))
    show("flush ignores DMA", fuzz_campaign(args.seed, args.schedules, args.wrs,
                                            mutation="flush_ignores_inflight", forced_mid_dma=True))


if __name__ == "__main__":
    main()
