"""Sparse host physical memory in 4 KiB pages of 64-bit words."""

from __future__ import annotations

from array import array

PAGE_SIZE = 4096
PAGE_SHIFT = 12
WORDS_PER_PAGE = PAGE_SIZE // 8
_ZERO_PAGE = bytes(PAGE_SIZE)


class PhysMem:
    """Pages materialise on first write; reads of untouched memory return zeros."""

    def __init__(self, size: int | None = None):
        self.size = size
        self.pages: dict[int, array] = {}

    def _check(self, hpa: int, n: int) -> None:
        if hpa < 0 or (self.size is not None and hpa + n > self.size):
            raise IndexError(f"HPA {hpa:#x}+{n} outside physical memory")

    def page(self, ppn: int) -> array:
        pg = self.pages.get(ppn)
        if pg is None:
            pg = self.pages[ppn] = array("Q", bytes(PAGE_SIZE))
        return pg

    def read_word(self, hpa: int) -> int:
        self._check(hpa, 8)
        pg = self.pages.get(hpa >> PAGE_SHIFT)
        return 0 if pg is None else pg[(hpa & 0xFFF) >> 3]

    def write_word(self, hpa: int, value: int) -> None:
        self._check(hpa, 8)
        self.page(hpa >> PAGE_SHIFT)[(hpa & 0xFFF) >> 3] = value

    def read(self, hpa: int, n: int) -> bytes:
        self._check(hpa, n)
        off = hpa & 0xFFF
        if off + n <= PAGE_SIZE:
            pg = self.pages.get(hpa >> PAGE_SHIFT)
            return bytes(_ZERO_PAGE[:n] if pg is None else memoryview(pg).cast("B")[off : off + n])
        out = bytearray()
        while n:
            off = hpa & 0xFFF
            chunk = min(n, PAGE_SIZE - off)
            pg = self.pages.get(hpa >> PAGE_SHIFT)
            src = _ZERO_PAGE if pg is None else memoryview(pg).cast("B")
            out += src[off : off + chunk]
            hpa += chunk
            n -= chunk
        return bytes(out)

    def write(self, hpa: int, data: bytes) -> None:
        self._check(hpa, len(data))
        off = hpa & 0xFFF
        if off + len(data) <= PAGE_SIZE:
            memoryview(self.page(hpa >> PAGE_SHIFT)).cast("B")[off : off + len(data)] = data
            return
        pos = 0
        while pos < len(data):
            off = hpa & 0xFFF
            chunk = min(len(data) - pos, PAGE_SIZE - off)
            view = memoryview(self.page(hpa >> PAGE_SHIFT)).cast("B")
            view[off : off + chunk] = data[pos : pos + chunk]
            hpa += chunk
            pos += chunk

    def discard(self, base: int, size: int) -> None:
        """Drop (zero) every page in ``[base, base+size)``."""
        first, last = base >> PAGE_SHIFT, (base + size - 1) >> PAGE_SHIFT
        if last - first < len(self.pages):
            for ppn in range(first, last + 1):
                self.pages.pop(ppn, None)
        else:
            for ppn in [p for p in self.pages if first <= p <= last]:
                del self.pages[ppn]
