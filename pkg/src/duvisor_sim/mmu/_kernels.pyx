# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled MMU hot kernels. Must stay behaviourally identical to _pykernels."""

from cpython cimport array

ctypedef unsigned long long u64

cdef u64 PTE_V = 0x1
cdef u64 PTE_LEAF = 0xE

WALK_OK = 0
WALK_UNMAPPED = 1
WALK_NODE_PMC = 2


cdef inline bint _covered(array.array bases, array.array ends, array.array perms,
                          Py_ssize_t n, u64 hpa, u64 length, unsigned char need):
    cdef Py_ssize_t i
    cdef u64 last = hpa + length
    cdef u64* b = bases.data.as_ulonglongs
    cdef u64* e = ends.data.as_ulonglongs
    cdef unsigned char* p = perms.data.as_uchars
    for i in range(n):
        if b[i] <= hpa and last <= e[i] and (p[i] & need) == need:
            return True
    return False


def pmc_covered(array.array bases, array.array ends, array.array perms,
                Py_ssize_t n, u64 hpa, u64 length, unsigned char need):
    return _covered(bases, ends, perms, n, hpa, length, need)


def walk(dict pages, u64 root_ppn, u64 vpn, int levels,
         array.array bases, array.array ends, array.array perms,
         Py_ssize_t n, list touched):
    cdef u64 ppn = root_ppn
    cdef u64 idx, pte, pte_addr
    cdef int level
    cdef array.array page
    for level in range(levels - 1, -1, -1):
        idx = (vpn >> (9 * level)) & 0x1FF
        pte_addr = (ppn << 12) | (idx << 3)
        if n >= 0 and not _covered(bases, ends, perms, n, pte_addr, 8, 1):
            return 2, pte_addr
        if touched is not None:
            touched.append(pte_addr)
        obj = pages.get(ppn)
        if obj is None:
            pte = 0
        else:
            page = <array.array>obj
            pte = page.data.as_ulonglongs[idx]
        if not (pte & PTE_V):
            return 1, level
        if pte & PTE_LEAF:
            if level != 0:
                return 1, level
            return 0, pte
        ppn = pte >> 10
    return 1, 0
