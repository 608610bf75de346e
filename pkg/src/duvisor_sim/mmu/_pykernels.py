"""Pure-Python versions of the MMU hot kernels.

Signatures mirror ``_kernels.pyx`` exactly; :mod:`duvisor_sim.mmu._accel`
picks whichever is importable.
"""

PTE_V = 0x1
PTE_R = 0x2
PTE_W = 0x4
PTE_X = 0x8
PTE_LEAF = PTE_R | PTE_W | PTE_X

WALK_OK = 0
WALK_UNMAPPED = 1
WALK_NODE_PMC = 2


def pmc_covered(bases, ends, perms, n, hpa, length, need):
    """True if ``[hpa, hpa+length)`` sits inside one packed region granting ``need``."""
    last = hpa + length
    for i in range(n):
        if bases[i] <= hpa and last <= ends[i] and (perms[i] & need) == need:
            return True
    return False


def walk(pages, root_ppn, vpn, levels, bases, ends, perms, n, touched):
    """Walk a radix table stored in ``pages`` (ppn -> array('Q')).

    Every node page is PMC-checked for a read of the PTE word before it is
    used. Returns ``(status, value)``: the leaf PTE on ``WALK_OK``, the level
    reached on ``WALK_UNMAPPED``, the offending node HPA on ``WALK_NODE_PMC``.
    """
    ppn = root_ppn
    for level in range(levels - 1, -1, -1):
        idx = (vpn >> (9 * level)) & 0x1FF
        pte_addr = (ppn << 12) | (idx << 3)
        if n >= 0 and not pmc_covered(bases, ends, perms, n, pte_addr, 8, PTE_R >> 1):
            return WALK_NODE_PMC, pte_addr
        if touched is not None:
            touched.append(pte_addr)
        page = pages.get(ppn)
        pte = page[idx] if page is not None else 0
        if not pte & PTE_V:
            return WALK_UNMAPPED, level
        if pte & PTE_LEAF:
            if level != 0:
                # no superpages
                return WALK_UNMAPPED, level
            return WALK_OK, pte
        ppn = pte >> 10
    return WALK_UNMAPPED, 0
