"""Per-core physical memory checking (PMC) range registers with the V bit."""

from __future__ import annotations

import enum
from array import array
from dataclasses import dataclass

from duvisor_sim.mmu import _accel

PAGE_SIZE = 4096
PMC_SLOTS = 64


class Perm(enum.IntFlag):
    NONE = 0
    R = 1
    W = 2
    X = 4
    RW = R | W
    RX = R | X
    RWX = R | W | X


class Access(enum.Enum):
    READ = "r"
    WRITE = "w"
    EXECUTE = "x"

    @property
    def perm(self) -> Perm:
        return _ACCESS_PERM[self]


_ACCESS_PERM = {Access.READ: Perm.R, Access.WRITE: Perm.W, Access.EXECUTE: Perm.X}


class PmcConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PmcRegion:
    base: int
    size: int
    perms: Perm = Perm.RWX
    v_bit: bool = True
    valid: bool = True

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, hpa: int, length: int) -> bool:
        return self.base <= hpa and hpa + length <= self.end


INVALID_REGION = PmcRegion(0, 0, Perm.NONE, False, False)


class PmcBank:
    """The 64 range registers of one core.

    Valid V-bit regions are also kept packed in flat arrays for the
    check kernel; the packing is rebuilt on every reprogram.
    """

    def __init__(self) -> None:
        self.slots: list[PmcRegion] = [INVALID_REGION] * PMC_SLOTS
        self._repack()

    def _repack(self) -> None:
        live = [r for r in self.slots if r.valid and r.v_bit]
        self.bases = array("Q", [r.base for r in live])
        self.ends = array("Q", [r.end for r in live])
        self.perms = array("B", [int(r.perms) for r in live])
        self.n = len(live)

    def install(self, index: int, region: PmcRegion) -> None:
        if not 0 <= index < PMC_SLOTS:
            raise PmcConfigError(f"PMC slot {index} out of range (0..{PMC_SLOTS - 1})")
        if region.valid:
            if region.size <= 0:
                raise PmcConfigError("valid PMC region needs size > 0")
            if region.base % PAGE_SIZE or region.size % PAGE_SIZE:
                raise PmcConfigError(
                    f"PMC region {region.base:#x}+{region.size:#x} not page aligned"
                )
        self.slots[index] = region
        self._repack()

    def clear(self, index: int) -> None:
        self.install(index, INVALID_REGION)

    def free_slot(self) -> int | None:
        for i, r in enumerate(self.slots):
            if not r.valid:
                return i
        return None

    def snapshot(self) -> tuple[PmcRegion, ...]:
        return tuple(self.slots)

    def load(self, slots: tuple[PmcRegion, ...]) -> None:
        self.slots = list(slots)
        self._repack()

    def check(self, hpa: int, length: int, v_derived: bool, access: Access) -> bool:
        if not v_derived:
            return True
        return _accel.pmc_covered(
            self.bases, self.ends, self.perms, self.n, hpa, length, int(access.perm)
        )


def pmc_program(core, index: int, region: PmcRegion) -> None:
    """Install ``region`` in slot ``index`` of ``core``. HS-only."""
    core.require_hs("pmc")
    core.pmc.install(index, region)


def pmc_check(core, hpa: int, length: int, v_derived: bool, access: Access) -> bool:
    """True when the access passes; False is a PMC violation for the caller to trap."""
    if length <= 0:
        raise ValueError("pmc_check needs len > 0")
    return core.pmc.check(hpa, length, v_derived, access)
