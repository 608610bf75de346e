"""Compare the compiled MMU kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--pages N] [--calls N] [--regions N]

Builds one stage-2 table in simulated memory, then times ``walk`` and
``pmc_covered`` from both backends on the same random inputs and checks
that they agree.
"""

from __future__ import annotations

import argparse
import random
import sys
import timeit

from duvisor_sim.mmu import _pykernels
from duvisor_sim.mmu.memory import PAGE_SHIFT, PAGE_SIZE, PhysMem
from duvisor_sim.mmu.pagetable import LEVELS, StageTwoPageTable
from duvisor_sim.mmu.pmc import Perm, PmcBank, PmcRegion

try:
    from duvisor_sim.mmu import _kernels
except ImportError:
    _kernels = None

HPA_BASE = 0x8000_0000


def build(pages: int, regions: int, seed: int):
    rng = random.Random(seed)
    mem = PhysMem()
    next_node = [HPA_BASE + (1 << 30)]

    def node_alloc() -> int:
        next_node[0] += PAGE_SIZE
        return next_node[0]

    s2 = StageTwoPageTable(mem, HPA_BASE + (1 << 30), node_alloc)
    gpns = rng.sample(range(1 << 20), pages)
    for i, gpn in enumerate(gpns):
        s2.map(gpn << PAGE_SHIFT, HPA_BASE + i * PAGE_SIZE, Perm.RWX)
    bank = PmcBank()
    # decoy regions first so lookups scan the whole bank
    for i in range(regions - 1):
        bank.install(i, PmcRegion(0x1_0000_0000_0000 + i * 0x10_0000, 0x10_0000, Perm.R))
    bank.install(regions - 1, PmcRegion(HPA_BASE, 1 << 31, Perm.RWX))
    return mem, s2, bank, gpns


def time_call(fn, args_list, calls: int) -> float:
    """Nanoseconds per call, best of three passes."""
    n = len(args_list)

    def run():
        for i in range(calls):
            fn(*args_list[i % n])

    return min(timeit.repeat(run, number=1, repeat=3)) / calls * 1e9


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pages", type=int, default=2000)
    ap.add_argument("--calls", type=int, default=50_000)
    ap.add_argument("--regions", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if _kernels is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
        return 1

    mem, s2, bank, gpns = build(args.pages, args.regions, args.seed)
    rng = random.Random(args.seed + 1)
    vpns = [rng.choice(gpns) if rng.random() < 0.9 else rng.randrange(1 << 20) for _ in range(4096)]
    walk_args = [(mem.pages, s2.root >> PAGE_SHIFT, v, LEVELS, bank.bases, bank.ends, bank.perms, bank.n, None)
                 for v in vpns]
    hpas = [HPA_BASE + rng.randrange(1 << 31) - rng.randrange(1 << 20) for _ in range(4096)]
    pmc_args = [(bank.bases, bank.ends, bank.perms, bank.n, h, 8, 1) for h in hpas]

    for a in walk_args:
        if _kernels.walk(*a) != _pykernels.walk(*a):
            print(f"walk mismatch for vpn {a[2]:#x}", file=sys.stderr)
            return 2
    for a in pmc_args:
        if bool(_kernels.pmc_covered(*a)) != bool(_pykernels.pmc_covered(*a)):
            print(f"pmc_covered mismatch for hpa {a[4]:#x}", file=sys.stderr)
            return 2

    print(f"{'kernel':<12} {'python ns':>10} {'cython ns':>10} {'speedup':>8}")
    for name, args_list in (("walk", walk_args), ("pmc_covered", pmc_args)):
        py = time_call(getattr(_pykernels, name), args_list, args.calls)
        cy = time_call(getattr(_kernels, name), args_list, args.calls)
        print(f"{name:<12} {py:>10.0f} {cy:>10.0f} {py / cy:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
