"""Stage-1 and stage-2 radix page tables (3 levels x 9 bits, 4 KiB pages)."""

from __future__ import annotations

from typing import Callable

from duvisor_sim.mmu.memory import PAGE_SHIFT, PAGE_SIZE, PhysMem
from duvisor_sim.mmu.pmc import Perm

LEVELS = 3
ADDR_BITS = 39
ADDR_LIMIT = 1 << ADDR_BITS

PTE_V = 0x1
PTE_U = 0x10


def make_leaf(ppn: int, perms: Perm, user: bool = False) -> int:
    return (ppn << 10) | (int(perms) << 1) | PTE_V | (PTE_U if user else 0)


def make_pointer(ppn: int) -> int:
    return (ppn << 10) | PTE_V


def pte_perms(pte: int) -> Perm:
    return Perm((pte >> 1) & 7)


def vpn_index(vpn: int, level: int) -> int:
    return (vpn >> (9 * level)) & 0x1FF


class PageTableError(ValueError):
    pass


def _aligned(addr: int) -> bool:
    return addr % PAGE_SIZE == 0


class StageTwoPageTable:
    """GPA -> HPA table whose nodes live in physical memory.

    ``entries`` mirrors the leaves for dumping; the MMU never reads it.
    """

    def __init__(self, mem: PhysMem, root_hpa: int, node_alloc: Callable[[], int] | None = None):
        if not _aligned(root_hpa):
            raise PageTableError(f"S2 root {root_hpa:#x} not page aligned")
        self.mem = mem
        self.root = root_hpa
        self.node_alloc = node_alloc
        self.node_pages: set[int] = {root_hpa}
        self.entries: dict[int, tuple[int, Perm]] = {}

    def map(self, gpa: int, hpa: int, perms: Perm) -> None:
        s2_map(self, gpa, hpa, perms)

    def unmap(self, gpa: int) -> None:
        gpn = gpa >> PAGE_SHIFT
        if gpn not in self.entries:
            return
        pte_addr = self._leaf_slot(gpn, create=False)
        if pte_addr is not None:
            self.mem.write_word(pte_addr, 0)
        del self.entries[gpn]

    def relocate_node(self, old_hpa: int, new_hpa: int) -> None:
        """Move one node page to ``new_hpa``, rewriting the parent pointer."""
        if old_hpa not in self.node_pages:
            raise PageTableError(f"{old_hpa:#x} is not a node page")
        data = self.mem.read(old_hpa, PAGE_SIZE)
        self.mem.write(new_hpa, data)
        if old_hpa == self.root:
            self.root = new_hpa
        else:
            for node in self.node_pages:
                pg = self.mem.pages.get(node >> PAGE_SHIFT)
                if pg is None:
                    continue
                for i, pte in enumerate(pg):
                    if pte & PTE_V and not pte & 0xE and (pte >> 10) == old_hpa >> PAGE_SHIFT:
                        pg[i] = make_pointer(new_hpa >> PAGE_SHIFT)
        self.node_pages.discard(old_hpa)
        self.node_pages.add(new_hpa)

    def _leaf_slot(self, gpn: int, create: bool) -> int | None:
        node = self.root
        for level in range(LEVELS - 1, 0, -1):
            slot = node + vpn_index(gpn, level) * 8
            pte = self.mem.read_word(slot)
            if not pte & PTE_V:
                if not create:
                    return None
                if self.node_alloc is None:
                    raise PageTableError("S2 table has no node allocator")
                new = self.node_alloc()
                if not _aligned(new):
                    raise PageTableError(f"node page {new:#x} not page aligned")
                self.mem.discard(new, PAGE_SIZE)
                self.node_pages.add(new)
                self.mem.write_word(slot, make_pointer(new >> PAGE_SHIFT))
                node = new
            else:
                node = (pte >> 10) << PAGE_SHIFT
        return node + vpn_index(gpn, 0) * 8

    def dump(self) -> str:
        return dump_entries(self.entries)


def s2_map(s2: StageTwoPageTable, gpa: int, hpa: int, perms: Perm) -> None:
    """Install gpa -> hpa. No legality check: the PMC catches bad HPAs later."""
    if not (_aligned(gpa) and _aligned(hpa)):
        raise PageTableError(f"unaligned mapping {gpa:#x} -> {hpa:#x}")
    if not 0 <= gpa < ADDR_LIMIT:
        raise PageTableError(f"GPA {gpa:#x} outside the 39-bit space")
    gpn, hpn = gpa >> PAGE_SHIFT, hpa >> PAGE_SHIFT
    old = s2.entries.get(gpn)
    if old is not None:
        if old[0] != hpn:
            raise PageTableError(f"GPA {gpa:#x} already mapped to {old[0] << PAGE_SHIFT:#x}")
        if old[1] == Perm(perms):
            return
    slot = s2._leaf_slot(gpn, create=True)
    s2.mem.write_word(slot, make_leaf(hpn, perms))
    s2.entries[gpn] = (hpn, Perm(perms))


class StageOnePageTable:
    """Guest-owned GVA -> GPA table. ``root`` is a GPA; ``None`` means bare
    (translation off, GVA == GPA)."""

    def __init__(self, root_gpa: int | None = None):
        if root_gpa is not None and not _aligned(root_gpa):
            raise PageTableError(f"S1 root {root_gpa:#x} not page aligned")
        self.root = root_gpa
        self.entries: dict[int, tuple[int, Perm]] = {}

    @property
    def bare(self) -> bool:
        return self.root is None

    def dump(self) -> str:
        return dump_entries(self.entries)


def dump_entries(entries: dict[int, tuple[int, Perm]]) -> str:
    """Golden-file friendly dump: ``0x<in> -> 0x<out> rwx`` per leaf, sorted."""
    lines = []
    for vpn in sorted(entries):
        ppn, perms = entries[vpn]
        flags = "".join(c if perms & p else "-" for c, p in (("r", Perm.R), ("w", Perm.W), ("x", Perm.X)))
        lines.append(f"{vpn << PAGE_SHIFT:#012x} -> {ppn << PAGE_SHIFT:#012x} {flags}")
    return "\n".join(lines) + ("\n" if lines else "")
