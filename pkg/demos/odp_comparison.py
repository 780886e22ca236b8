"""Same faulting 2-byte Read against an on-demand-paging NIC and the library.

    python demos/odp_comparison.py --timeout-ms 2 16
"""

import argparse

from nprdma_sim.bench import Fault, Mode, Scenario, Verb, run_scenario


def mean(mode: Mode, timeout_ns: int) -> float:
    sc = Scenario(name=mode.value, mode=mode, verb=Verb.READ, msg_sizes=[2], iterations=3,
                  fault=Fault.MINOR, latency_overrides={"odp_timeout": timeout_ns})
    return run_scenario(sc).rows[0].mean_ns


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--timeout-ms", type=int, nargs="+", default=[2, 16])
    args = p.parse_args()
    for ms in args.timeout_ms:
        odp = mean(Mode.ODP, ms * 1_000_000)
        np_ = mean(Mode.NPRDMA, ms * 1_000_000)
        print(f"timeout {ms:>3} ms: odp {odp / 1000:9.1f}us  library {np_ / 1000:6.2f}us  "
              f"speedup {odp / np_:6.0f}x")


if __name__ == "__main__":
    main()
