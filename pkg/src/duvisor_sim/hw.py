"""Per-core DV-Ext hardware: privilege modes, the delegated register file,
trap routing, HURET and HUSUIPI.

Illegal operations route an ILLEGAL_HU_ACCESS trap to HS (running the
installed kernel handler) and then raise :class:`HardwareTrap` so the
offending software stops where it is.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

from duvisor_sim.mmu.pmc import PmcBank, PmcRegion

WORD_MASK = (1 << 64) - 1


class PrivilegeMode(enum.Enum):
    HS = "HS"
    HU = "HU"
    V = "V"

    # members compare by identity; Enum's default hash is a Python-level call
    # on the access-table hot path
    __hash__ = object.__hash__


class ExitReason(enum.IntEnum):
    S2PF_LOAD = 0
    S2PF_STORE = 1
    S2PF_FETCH = 2
    SENSITIVE_WFI = 3
    HYPERCALL = 4
    UIPI = 5
    TIMER = 6
    PMC_FAULT = 7
    ILLEGAL_HU_ACCESS = 8

    @property
    def delegatable(self) -> bool:
        return self in DELEGATABLE


DELEGATABLE = frozenset(
    {
        ExitReason.S2PF_LOAD,
        ExitReason.S2PF_STORE,
        ExitReason.S2PF_FETCH,
        ExitReason.SENSITIVE_WFI,
        ExitReason.HYPERCALL,
        ExitReason.UIPI,
    }
)
S2PF_REASONS = frozenset({ExitReason.S2PF_LOAD, ExitReason.S2PF_STORE, ExitReason.S2PF_FETCH})
TIMER_BIT = 1 << ExitReason.TIMER
ALL_DELEGATABLE_MASK = sum(1 << r for r in DELEGATABLE)


class Destination(enum.Enum):
    HU_HANDLER = "hu"
    HS_HANDLER = "hs"
    GUEST_HANDLER = "guest"


class TrapEvent(NamedTuple):
    core: int
    reason: ExitReason | None
    info: int
    destination: Destination
    from_mode: PrivilegeMode = PrivilegeMode.V
    pc: int = 0


class HardwareTrap(Exception):
    """Raised after an illegal instruction/CSR access has trapped to HS."""

    def __init__(self, event: TrapEvent):
        super().__init__(f"core {event.core}: {event.reason.name} from {event.from_mode.value}")
        self.event = event


HU_REGISTERS = ("hu_er", "hu_einfo", "hu_vitr", "hu_vpc", "hu_ehb", "hu_vcpuid")
H_REGISTERS = ("h_enable", "h_deleg", "h_vmid")
REGISTERS = HU_REGISTERS + H_REGISTERS


@dataclass
class DvRegisterFile:
    hu_er: int = 0
    hu_einfo: int = 0
    hu_vitr: int = 0
    hu_vpc: int = 0
    hu_ehb: int = 0
    hu_vcpuid: int = 0
    h_enable: int = 0
    h_deleg: int = 0
    h_vmid: int = 0

    def as_tuple(self) -> tuple[int, ...]:
        return tuple(getattr(self, r) for r in REGISTERS)


@dataclass(frozen=True)
class DvSnapshot:
    """Everything the kernel context-switches for a DV-enabled process."""

    registers: tuple[int, ...]
    pmc: tuple[PmcRegion, ...]
    pid: int | None = None
    uipi_latch: tuple[int, ...] = ()


def access_legal(mode: PrivilegeMode, reg: str, h_enable: bool) -> bool:
    """Register access rule, independent of read/write: HS sees everything,
    V nothing, HU only the hu_ registers and only while h_enable is set."""
    if reg not in REGISTERS:
        raise KeyError(reg)
    if mode is PrivilegeMode.HS:
        return True
    if mode is PrivilegeMode.V:
        return False
    return reg.startswith("hu_") and h_enable


def access_table() -> list[dict]:
    """Machine-readable access-control report, one row per (register, mode, kind)."""
    rows = []
    for reg in REGISTERS:
        for mode in PrivilegeMode:
            for kind in ("read", "write"):
                on = access_legal(mode, reg, True)
                off = access_legal(mode, reg, False)
                rows.append(
                    {
                        "register": reg,
                        "mode": mode.value,
                        "kind": kind,
                        "legal_dv_on": on,
                        "legal_dv_off": off,
                    }
                )
    return rows


_LEGAL = {(m, r, e): access_legal(m, r, e) for m in PrivilegeMode for r in REGISTERS for e in (False, True)}


class Core:
    def __init__(self, core_id: int, platform: "DvPlatform | None" = None):
        self.id = core_id
        self.platform = platform
        self.mode = PrivilegeMode.HS
        self.pc = 0
        self.regs = DvRegisterFile()
        self.pmc = PmcBank()
        self.uipi_latch: list[int] = []
        # guest-visible pending virtual interrupts of the resident vCPU
        self.guest_pending = 0
        self.owner_pid: int | None = None
        # where an HS trap came from, for the kernel's return
        self.hs_prev_mode = PrivilegeMode.HS
        self.hs_epc = 0
        self.hs_cause: ExitReason | None = None
        self.hs_tval = 0

    def __repr__(self) -> str:
        return f"Core({self.id}, {self.mode.value}, pc={self.pc:#x})"

    # -- privilege helpers -------------------------------------------------

    def _illegal(self, info: int = 0) -> None:
        event = self.route_trap(ExitReason.ILLEGAL_HU_ACCESS, info)
        raise HardwareTrap(event)

    def require_hs(self, what: str = "") -> None:
        if self.mode is not PrivilegeMode.HS:
            self._illegal()

    # -- CSR access ----------------------------------------------------------

    def csr_access(self, reg: str, kind: str, value: int | None = None) -> int:
        """Read or write a DV register; returns the current (or old) value."""
        legal = _LEGAL.get((self.mode, reg, bool(self.regs.h_enable)))
        if legal is None:
            raise KeyError(f"unknown DV register {reg!r}")
        if not legal:
            self._illegal()
        old = getattr(self.regs, reg)
        if kind == "write":
            if value is None:
                raise ValueError("write needs a value")
            value &= WORD_MASK
            if reg == "h_deleg":
                value &= ~TIMER_BIT
            setattr(self.regs, reg, value)
        elif kind != "read":
            raise ValueError(f"bad access kind {kind!r}")
        return old

    def csr_read(self, reg: str) -> int:
        legal = _LEGAL.get((self.mode, reg, bool(self.regs.h_enable)))
        if not legal:
            return self.csr_access(reg, "read")
        return getattr(self.regs, reg)

    def csr_write(self, reg: str, value: int) -> int:
        regs = self.regs
        if reg == "h_deleg" or value is None or not _LEGAL.get((self.mode, reg, bool(regs.h_enable))):
            return self.csr_access(reg, "write", value)
        old = getattr(regs, reg)
        setattr(regs, reg, value & WORD_MASK)
        return old

    # -- traps ---------------------------------------------------------------

    def delegated(self, reason: ExitReason) -> bool:
        r = self.regs
        return bool(
            reason.delegatable
            and r.h_enable
            and (r.h_deleg >> reason) & 1
            and self.mode is PrivilegeMode.V
            and r.hu_ehb
        )

    def route_trap(self, reason: ExitReason, info: int = 0) -> TrapEvent:
        from_mode = self.mode
        pc = self.pc
        if self.delegated(reason):
            r = self.regs
            r.hu_er = int(reason)
            r.hu_einfo = info & WORD_MASK
            r.hu_vpc = pc
            self.mode = PrivilegeMode.HU
            self.pc = r.hu_ehb
            event = TrapEvent(self.id, reason, info, Destination.HU_HANDLER, from_mode, pc)
            if self.platform is not None:
                self.platform.observe(event)
            return event
        self.hs_prev_mode = from_mode
        self.hs_epc = pc
        self.hs_cause = reason
        self.hs_tval = info
        self.mode = PrivilegeMode.HS
        event = TrapEvent(self.id, reason, info, Destination.HS_HANDLER, from_mode, pc)
        if self.platform is not None:
            self.platform.observe(event)
            if self.platform.hs_handler is not None:
                self.platform.hs_handler(self, event)
        return event

    def sret(self) -> None:
        """Kernel return to wherever the last HS trap came from."""
        self.mode = self.hs_prev_mode
        self.pc = self.hs_epc

    # -- instructions --------------------------------------------------------

    def huret(self) -> TrapEvent | None:
        """Resume the guest at hu_vpc, injecting hu_vitr.

        Returns the UIPI exit event if a latched UIPI fired on entry.
        """
        if self.mode is PrivilegeMode.V:
            self._illegal()
        if self.mode is PrivilegeMode.HU and not self.regs.h_enable:
            self._illegal()
        r = self.regs
        self.mode = PrivilegeMode.V
        self.pc = r.hu_vpc
        if r.hu_vitr:
            self.guest_pending |= r.hu_vitr
            r.hu_vitr = 0
        if self.platform is not None:
            self.platform.observe_entry(self)
        if self.uipi_latch:
            sender = self.uipi_latch.pop(0)
            return self.route_trap(ExitReason.UIPI, sender)
        return None

    def save_dv(self) -> DvSnapshot:
        self.require_hs("save")
        return DvSnapshot(self.regs.as_tuple(), self.pmc.snapshot(), self.owner_pid, tuple(self.uipi_latch))

    def restore_dv(self, snap: DvSnapshot) -> None:
        self.require_hs("restore")
        vmid = snap.registers[REGISTERS.index("h_vmid")]
        if vmid and self.platform is not None:
            for other in self.platform.cores:
                if other is self:
                    continue
                if other.regs.h_vmid == vmid and other.owner_pid != snap.pid:
                    raise ValueError(
                        f"VMID {vmid} is live on core {other.id} for pid {other.owner_pid}"
                    )
        for reg, val in zip(REGISTERS, snap.registers):
            setattr(self.regs, reg, val)
        self.pmc.load(snap.pmc)
        self.owner_pid = snap.pid
        self.uipi_latch = list(snap.uipi_latch)

    def save_restore_dv(self, direction: str, snapshot: DvSnapshot | None = None) -> DvSnapshot:
        if direction == "save":
            return self.save_dv()
        if direction == "restore":
            if snapshot is None:
                raise ValueError("restore needs a snapshot")
            self.restore_dv(snapshot)
            return snapshot
        raise ValueError(direction)


class UipiResult(enum.Enum):
    DELIVERED = "delivered"
    PENDED = "pended"


@dataclass
class DvPlatform:
    """A set of cores sharing one UIPI fabric."""

    n_cores: int = 1
    cores: list[Core] = field(init=False)
    hs_handler: Callable[[Core, TrapEvent], None] | None = None
    trap_observer: Callable[[TrapEvent], None] | None = None
    entry_observer: Callable[[Core], None] | None = None

    def __post_init__(self) -> None:
        self.cores = [Core(i, self) for i in range(self.n_cores)]

    def observe(self, event: TrapEvent) -> None:
        if self.trap_observer is not None:
            self.trap_observer(event)

    def observe_entry(self, core: Core) -> None:
        if self.entry_observer is not None:
            self.entry_observer(core)

    def find_receiver(self, vmid: int, vcpuid: int) -> Core | None:
        if not vmid:
            return None
        for c in self.cores:
            if c.regs.h_enable and c.regs.h_vmid == vmid and c.regs.hu_vcpuid == vcpuid:
                return c
        return None

    def husuipi(self, core_id: int, target_vcpuid: int) -> UipiResult:
        """Send a UIPI from ``core_id`` to the core running ``target_vcpuid``
        of the sender's own VM."""
        sender = self.cores[core_id]
        if sender.mode is PrivilegeMode.V or not sender.regs.h_enable:
            sender._illegal(target_vcpuid)
        target = self.find_receiver(sender.regs.h_vmid, target_vcpuid)
        if target is None:
            sender._illegal(target_vcpuid)
        if target.mode is PrivilegeMode.V:
            target.route_trap(ExitReason.UIPI, sender.regs.hu_vcpuid)
            return UipiResult.DELIVERED
        target.uipi_latch.append(sender.regs.hu_vcpuid)
        return UipiResult.PENDED


# free-function forms of the core operations -------------------------------------


def csr_access(core: Core, reg: str, kind: str, value: int | None = None) -> int:
    return core.csr_access(reg, kind, value)


def route_trap(core: Core, reason: ExitReason, info: int = 0) -> TrapEvent:
    return core.route_trap(reason, info)


def exec_huret(core: Core) -> TrapEvent | None:
    return core.huret()


def exec_husuipi(platform: DvPlatform, core_id: int, target_vcpuid: int) -> UipiResult:
    return platform.husuipi(core_id, target_vcpuid)


def save_restore_dv(core: Core, direction: str, snapshot: DvSnapshot | None = None) -> DvSnapshot:
    return core.save_restore_dv(direction, snapshot)
