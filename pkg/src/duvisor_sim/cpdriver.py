"""Host-kernel control plane: DV enablement, pinned region grants, VMIDs,
PMC-fault kills, timer scheduling and DV context switching.

Everything here runs "in HS" atomically between simulator steps.
"""

from __future__ import annotations

import contextlib
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from duvisor_sim.hw import (
    DvPlatform,
    DvRegisterFile,
    DvSnapshot,
    ExitReason,
    PrivilegeMode,
    REGISTERS,
    TIMER_BIT,
    TrapEvent,
)
from duvisor_sim.mmu.memory import PAGE_SIZE, PhysMem
from duvisor_sim.mmu.pmc import INVALID_REGION, PMC_SLOTS, Perm, PmcBank, PmcRegion

log = logging.getLogger(__name__)

HVA_BASE = 0x7F00_0000_0000


class CpError(Exception):
    pass


@dataclass(frozen=True)
class RegionGrant:
    hva_base: int
    hpa_base: int
    size: int
    slot: int
    pinned: bool = True

    @property
    def hpa_end(self) -> int:
        return self.hpa_base + self.size

    def contains(self, hpa: int, length: int = 1) -> bool:
        return self.hpa_base <= hpa and hpa + length <= self.hpa_end


@dataclass
class ProcessRecord:
    pid: int
    cores: tuple[int, ...]
    dv_enabled: bool = False
    vmid: int = 0
    deleg_mask: int = 0
    grants: list[RegionGrant] = field(default_factory=list)
    alive: bool = True
    kill_reason: str | None = None
    next_hva: int = HVA_BASE


@dataclass
class AuditRecord:
    step: int
    kind: str
    pid: int | None
    core: int | None
    detail: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"step": self.step, "kind": self.kind, "pid": self.pid, "core": self.core, **self.detail}


class FirstFitAllocator:
    """First-fit contiguous allocator over one physical extent."""

    def __init__(self, base: int, size: int):
        self.free: list[tuple[int, int]] = [(base, size)]

    def alloc(self, size: int, align: int = PAGE_SIZE) -> int | None:
        for i, (b, s) in enumerate(self.free):
            start = -(-b // align) * align
            if start + size <= b + s:
                pieces = []
                if start > b:
                    pieces.append((b, start - b))
                if start + size < b + s:
                    pieces.append((start + size, b + s - start - size))
                self.free[i : i + 1] = pieces
                return start
        return None

    def release(self, base: int, size: int) -> None:
        self.free.append((base, size))
        self.free.sort()
        merged: list[tuple[int, int]] = []
        for b, s in self.free:
            if merged and merged[-1][0] + merged[-1][1] == b:
                merged[-1] = (merged[-1][0], merged[-1][1] + s)
            else:
                merged.append((b, s))
        self.free = merged


class CpDriver:
    """The control plane. ``clock`` supplies the simulator step for audit stamps."""

    def __init__(
        self,
        platform: DvPlatform,
        mem: PhysMem,
        ram_base: int,
        ram_size: int,
        clock: Callable[[], int] = lambda: 0,
        max_vmid: int = 255,
    ):
        self.platform = platform
        self.mem = mem
        self.clock = clock
        self.max_vmid = max_vmid
        self.allocator = FirstFitAllocator(ram_base, ram_size)
        self.processes: dict[int, ProcessRecord] = {}
        self.audit: list[AuditRecord] = []
        self.runq: dict[int, deque] = {c.id: deque() for c in platform.cores}
        self.kill_listeners: list[Callable[[ProcessRecord], None]] = []
        self.audit_listeners: list[Callable[[AuditRecord], None]] = []
        self._next_pid = 100
        platform.hs_handler = self.handle_trap

    # -- bookkeeping ---------------------------------------------------------

    def _audit(self, kind: str, pid: int | None, core: int | None, **detail: Any) -> None:
        rec = AuditRecord(self.clock(), kind, pid, core, detail)
        self.audit.append(rec)
        for fn in self.audit_listeners:
            fn(rec)

    @contextlib.contextmanager
    def _kernel(self, core):
        """Run a block with ``core`` in HS, restoring its mode afterwards."""
        mode = core.mode
        core.mode = PrivilegeMode.HS
        try:
            yield core
        finally:
            core.mode = mode

    def _proc(self, pid: int) -> ProcessRecord:
        proc = self.processes.get(pid)
        if proc is None or not proc.alive:
            raise CpError(f"no live process {pid}")
        return proc

    def _resident(self, proc: ProcessRecord, core_id: int) -> bool:
        return self.platform.cores[core_id].owner_pid == proc.pid

    def _update_ctx(self, proc: ProcessRecord, core_id: int, fn: Callable) -> None:
        """Apply ``fn(core)`` live if resident, else to the saved context."""
        core = self.platform.cores[core_id]
        if self._resident(proc, core_id):
            with self._kernel(core):
                fn(core)
        for ent in self.runq[core_id]:
            if ent.pid == proc.pid and ent.hw_ctx.dv is not None:
                shadow = _ShadowCore(ent.hw_ctx.dv)
                fn(shadow)
                ent.hw_ctx.dv = shadow.snapshot()

    def check_grants_disjoint(self) -> None:
        spans = sorted(
            (g.hpa_base, g.hpa_end, p.pid)
            for p in self.processes.values() if p.alive for g in p.grants
        )
        for (b0, e0, p0), (b1, e1, p1) in zip(spans, spans[1:]):
            if b1 < e0:
                raise AssertionError(f"grants overlap: pid {p0} [{b0:#x},{e0:#x}) / pid {p1} [{b1:#x},{e1:#x})")

    # -- processes -----------------------------------------------------------

    def spawn(self, cores: tuple[int, ...] | list[int]) -> int:
        pid = self._next_pid
        self._next_pid += 1
        self.processes[pid] = ProcessRecord(pid, tuple(cores))
        for c in cores:
            core = self.platform.cores[c]
            if core.owner_pid is None:
                core.owner_pid = pid
        self._audit("spawn", pid, None, cores=list(cores))
        return pid

    def add_entity(self, core_id: int, entity) -> None:
        """Queue a schedulable entity (needs ``pid`` and ``hw_ctx``)."""
        core = self.platform.cores[core_id]
        if core.owner_pid is not None and core.owner_pid != entity.pid and entity.hw_ctx.dv is None:
            entity.hw_ctx.dv = DvSnapshot((0,) * len(REGISTERS), (INVALID_REGION,) * PMC_SLOTS, entity.pid)
        self.runq[core_id].append(entity)

    def current(self, core_id: int):
        q = self.runq[core_id]
        return q[0] if q else None

    # -- ioctls --------------------------------------------------------------

    def ioctl_enable_dv(self, pid: int, deleg_mask: int) -> int:
        proc = self._proc(pid)
        if proc.dv_enabled:
            raise CpError(f"DV-Ext already enabled for pid {pid}")
        used = {p.vmid for p in self.processes.values() if p.alive and p.dv_enabled}
        vmid = next((v for v in range(1, self.max_vmid + 1) if v not in used), None)
        if vmid is None:
            raise CpError("VMID space exhausted")
        proc.dv_enabled = True
        proc.vmid = vmid
        proc.deleg_mask = deleg_mask & ~TIMER_BIT

        def program(core):
            core.csr_write("h_enable", 1)
            core.csr_write("h_deleg", deleg_mask)
            core.csr_write("h_vmid", vmid)

        for c in proc.cores:
            self._update_ctx(proc, c, program)
        self._audit("ioctl_enable_dv", pid, None, vmid=vmid, deleg=proc.deleg_mask)
        return vmid

    def ioctl_alloc_region(self, pid: int, size: int) -> RegionGrant:
        proc = self._proc(pid)
        if not proc.dv_enabled:
            raise CpError("DV-Ext not enabled")
        if size <= 0 or size % PAGE_SIZE:
            raise CpError(f"region size {size:#x} not a page multiple")
        used = {g.slot for g in proc.grants}
        slot = next((s for s in range(PMC_SLOTS) if s not in used), None)
        if slot is None:
            self._audit("ioctl_alloc_region_failed", pid, None, size=size, why="pmc-slots")
            raise CpError("no free PMC slot")
        hpa = self.allocator.alloc(size)
        if hpa is None:
            self._audit("ioctl_alloc_region_failed", pid, None, size=size, why="memory")
            raise CpError(f"no contiguous {size:#x} bytes left")
        self.mem.discard(hpa, size)
        grant = RegionGrant(proc.next_hva, hpa, size, slot)
        proc.next_hva += size
        proc.grants.append(grant)
        region = PmcRegion(hpa, size, Perm.RWX, v_bit=True)
        for c in proc.cores:
            self._update_ctx(proc, c, lambda core: core.pmc.install(slot, region))
        self.check_grants_disjoint()
        self._audit("ioctl_alloc_region", pid, None, hpa=hpa, size=size, slot=slot)
        return grant

    # -- traps ---------------------------------------------------------------

    def handle_trap(self, core, event: TrapEvent) -> None:
        reason = event.reason
        if reason is ExitReason.TIMER:
            self.on_timer(core)
        elif reason is ExitReason.PMC_FAULT:
            self.on_pmc_fault(core)
        else:
            self._audit("trap", core.owner_pid, core.id, reason=reason.name, info=event.info)
            pid = core.owner_pid
            if pid is not None and pid in self.processes and self.processes[pid].alive:
                self.kill(pid, f"unhandled {reason.name} in HS")

    def on_pmc_fault(self, core) -> None:
        pid = core.owner_pid
        proc = self.processes.get(pid)
        # v_derived accesses only exist in V mode, i.e. inside a DV process
        assert proc is not None and proc.dv_enabled, "PMC fault outside a DV process"
        self._audit("pmc_fault", pid, core.id, hpa=core.hs_tval)
        self.kill(pid, f"PMC violation at {core.hs_tval:#x}")

    def kill(self, pid: int, reason: str) -> None:
        proc = self.processes[pid]
        if not proc.alive:
            return
        proc.alive = False
        proc.kill_reason = reason
        for c in proc.cores:
            core = self.platform.cores[c]
            q = self.runq[c]
            for ent in [e for e in q if e.pid == pid]:
                q.remove(ent)
            if core.owner_pid == pid:
                with self._kernel(core):
                    for reg in REGISTERS:
                        core.csr_write(reg, 0)
                    core.pmc.load((INVALID_REGION,) * PMC_SLOTS)
                core.uipi_latch.clear()
                core.guest_pending = 0
                core.owner_pid = None
                core.mode = PrivilegeMode.HS
                nxt = self.current(c)
                if nxt is not None:
                    self._dispatch(core, nxt)
        for g in proc.grants:
            self.allocator.release(g.hpa_base, g.size)
            self.mem.discard(g.hpa_base, g.size)
        proc.grants.clear()
        self._audit("kill", pid, None, reason=reason)
        log.info("killed pid %d: %s", pid, reason)
        for fn in self.kill_listeners:
            fn(proc)

    # -- scheduling ------------------------------------------------------------

    def _save(self, core, ent) -> None:
        ctx = ent.hw_ctx
        ctx.mode = core.hs_prev_mode
        ctx.pc = core.hs_epc
        ctx.guest_pending = core.guest_pending
        ctx.dv = core.save_dv()

    def _dispatch(self, core, ent) -> None:
        ctx = ent.hw_ctx
        with self._kernel(core):
            if ctx.dv is not None:
                core.restore_dv(ctx.dv)
            else:
                core.owner_pid = ent.pid
        core.guest_pending = ctx.guest_pending
        core.hs_prev_mode = ctx.mode
        core.hs_epc = ctx.pc
        core.sret()

    def on_timer(self, core) -> tuple[Any, Any]:
        """Round-robin the core's run queue; returns (previous, next)."""
        q = self.runq[core.id]
        prev = q[0] if q else None
        self._audit("timer", core.owner_pid, core.id)
        if len(q) < 2:
            core.sret()
            return prev, prev
        self._save(core, prev)
        q.rotate(-1)
        nxt = q[0]
        self._dispatch(core, nxt)
        return prev, nxt


@dataclass
class HwContext:
    """Per-entity hardware context kept by the kernel while descheduled."""

    mode: PrivilegeMode = PrivilegeMode.HU
    pc: int = 0
    guest_pending: int = 0
    dv: DvSnapshot | None = None


class _ShadowCore:
    """Minimal core stand-in for programming a descheduled context."""

    def __init__(self, snap: DvSnapshot):
        self.regs = DvRegisterFile(*snap.registers)
        self.pmc = PmcBank()
        self.pmc.load(snap.pmc)
        self._snap = snap

    def csr_write(self, reg: str, value: int) -> int:
        old = getattr(self.regs, reg)
        if reg == "h_deleg":
            value &= ~TIMER_BIT
        setattr(self.regs, reg, value)
        return old

    def snapshot(self) -> DvSnapshot:
        return DvSnapshot(self.regs.as_tuple(), self.pmc.snapshot(), self._snap.pid, self._snap.uipi_latch)
