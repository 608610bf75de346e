"""Two-stage translation with PMC checking of every V-derived physical access."""

from __future__ import annotations

import enum
from typing import NamedTuple

from duvisor_sim.mmu import _accel
from duvisor_sim.mmu.memory import PAGE_SHIFT
from duvisor_sim.mmu.pagetable import (
    ADDR_LIMIT,
    LEVELS,
    PTE_V,
    StageOnePageTable,
    StageTwoPageTable,
    vpn_index,
)
from duvisor_sim.mmu.pmc import Access, Perm


# identity tests: enum hashing runs Python code on every dict lookup
_READ, _WRITE = Access.READ, Access.WRITE
_R, _W, _X = int(Perm.R), int(Perm.W), int(Perm.X)


class FaultKind(enum.Enum):
    S1_PAGE_FAULT = "s1pf"
    S2_PAGE_FAULT = "s2pf"
    PMC_VIOLATION = "pmc"


class Fault(NamedTuple):
    kind: FaultKind
    addr: int
    # access of the failing stage; S1-walk node fetches are reads
    access: Access = Access.READ


def translate_gpa(core, s2: StageTwoPageTable, gpa: int, access: Access,
                  length: int = 1, audit: list | None = None) -> int | Fault:
    """GPA -> HPA for a guest-derived access; every node fetch and the leaf
    HPA are PMC-checked with v_derived set.

    ``audit``, when given, collects ``(hpa, length)`` of every checked access.
    """
    if not 0 <= gpa < ADDR_LIMIT:
        return Fault(FaultKind.S2_PAGE_FAULT, gpa, access)
    bank = core.pmc
    nodes = [] if audit is not None else None
    status, value = _accel.walk(
        s2.mem.pages, s2.root >> PAGE_SHIFT, gpa >> PAGE_SHIFT, LEVELS,
        bank.bases, bank.ends, bank.perms, bank.n, nodes,
    )
    if nodes:
        audit.extend([(a, 8) for a in nodes])
    if status == _accel.WALK_NODE_PMC:
        return Fault(FaultKind.PMC_VIOLATION, value, Access.READ)
    if status != _accel.WALK_OK:
        return Fault(FaultKind.S2_PAGE_FAULT, gpa, access)
    need = _R if access is _READ else _W if access is _WRITE else _X
    if ((value >> 1) & 7) & need != need:
        return Fault(FaultKind.S2_PAGE_FAULT, gpa, access)
    hpa = ((value >> 10) << PAGE_SHIFT) | (gpa & 0xFFF)
    if not _accel.pmc_covered(bank.bases, bank.ends, bank.perms, bank.n, hpa, length, need):
        return Fault(FaultKind.PMC_VIOLATION, hpa, access)
    if audit is not None:
        audit.append((hpa, length))
    return hpa


def s1_walk(core, s1: StageOnePageTable, s2: StageTwoPageTable, gva: int,
            audit: list | None = None) -> tuple[int, Perm] | Fault:
    """Walk stage 1; each node fetch is itself stage-2 translated."""
    if not 0 <= gva < ADDR_LIMIT:
        return Fault(FaultKind.S1_PAGE_FAULT, gva)
    vpn = gva >> PAGE_SHIFT
    node_gpa = s1.root
    mem = s2.mem
    for level in range(LEVELS - 1, -1, -1):
        pte_gpa = node_gpa + vpn_index(vpn, level) * 8
        h = translate_gpa(core, s2, pte_gpa, Access.READ, 8, audit)
        if isinstance(h, Fault):
            return h
        pte = mem.read_word(h)
        if not pte & PTE_V:
            return Fault(FaultKind.S1_PAGE_FAULT, gva)
        if pte & 0xE:
            if level:
                return Fault(FaultKind.S1_PAGE_FAULT, gva)
            return ((pte >> 10) << PAGE_SHIFT) | (gva & 0xFFF), Perm((pte >> 1) & 7)
        node_gpa = (pte >> 10) << PAGE_SHIFT
    return Fault(FaultKind.S1_PAGE_FAULT, gva)


def translate(core, s1: StageOnePageTable, s2: StageTwoPageTable, gva: int, access: Access,
              length: int = 1, audit: list | None = None) -> int | Fault:
    """GVA -> HPA. S1 faults go to the guest, S2 faults are VM exits, PMC
    violations always go to HS."""
    if s1.bare:
        gpa = gva
    else:
        r = s1_walk(core, s1, s2, gva, audit)
        if isinstance(r, Fault):
            return r
        gpa, perms = r
        if perms & access.perm != access.perm:
            return Fault(FaultKind.S1_PAGE_FAULT, gva, access)
    return translate_gpa(core, s2, gpa, access, length, audit)


def s1_map(core, s1: StageOnePageTable, s2: StageTwoPageTable, gva: int, gpa: int,
           perms: Perm, node_pool) -> Fault | None:
    """Install gva -> gpa in the guest's S1 table using guest-derived writes.

    Returns the first fault hit (an S2PF on an S1 node page, say); the call
    is idempotent so the guest can simply retry after the exit is handled.
    """
    mem = s2.mem
    vpn = gva >> PAGE_SHIFT
    node_gpa = s1.root
    for level in range(LEVELS - 1, 0, -1):
        slot = node_gpa + vpn_index(vpn, level) * 8
        h = translate_gpa(core, s2, slot, Access.WRITE, 8)
        if isinstance(h, Fault):
            return h
        pte = mem.read_word(h)
        if pte & PTE_V:
            node_gpa = (pte >> 10) << PAGE_SHIFT
            continue
        # the child must be reachable before the pointer is published; the
        # pool only advances once it is, so a faulting attempt leaks nothing
        child = node_pool.peek()
        hc = translate_gpa(core, s2, child, Access.WRITE, 8)
        if isinstance(hc, Fault):
            return hc
        node_pool.take()
        mem.discard(hc & ~0xFFF, 4096)
        mem.write_word(h, ((child >> PAGE_SHIFT) << 10) | PTE_V)
        node_gpa = child
    slot = node_gpa + vpn_index(vpn, 0) * 8
    h = translate_gpa(core, s2, slot, Access.WRITE, 8)
    if isinstance(h, Fault):
        return h
    mem.write_word(h, ((gpa >> PAGE_SHIFT) << 10) | (int(perms) << 1) | PTE_V)
    s1.entries[vpn] = (gpa >> PAGE_SHIFT, Perm(perms))
    return None
