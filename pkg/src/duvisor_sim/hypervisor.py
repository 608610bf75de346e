"""The user-level hypervisor: VM boot, one vthread per vCPU, delegated exit
dispatch, demand paging from region grants, MMIO emulation and virtual
interrupt injection.

A vthread handles an exit in two simulator steps. The first reads
hu_er/hu_einfo and runs the handler (which may block on WFI). The second
re-checks the state area, writes hu_vitr and executes HURET. Injection
always writes the state area before sending a UIPI, so a notification
racing with an exit is either drained by the re-check or latched.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

from duvisor_sim.cpdriver import CpError, HwContext, RegionGrant
from duvisor_sim.guest import (
    GUEST_PC_BASE,
    HC_HALT,
    HC_NULL,
    HC_VIPI,
    MEMORY_OPS,
    REG_A0,
    GuestCpu,
    GuestCrash,
    GuestProgram,
    NodePool,
    StepEffect,
)
from duvisor_sim.hw import (
    ALL_DELEGATABLE_MASK,
    S2PF_REASONS,
    ExitReason,
    HardwareTrap,
    PrivilegeMode,
)
from duvisor_sim.mmu.memory import PAGE_SIZE
from duvisor_sim.mmu.pagetable import StageOnePageTable, StageTwoPageTable
from duvisor_sim.mmu.pmc import Perm
from duvisor_sim.pvio import (
    WINDOW_SIZE,
    BackendDevice,
    BackendFault,
    BlkDevice,
    GuestMemoryAccess,
    GuestNetDriver,
    NetDevice,
    Packet,
    PacketSource,
    backend_blk_drain,
    backend_rx_poll,
    backend_tx_drain,
    flush_blk_image,
    make_device,
)

log = logging.getLogger(__name__)

MiB = 1 << 20
MMIO_BASE = 0x40_0000_0000
IPI_IRQ = 1
DEFAULT_IRQS = {"console": 4, "net": 5, "blk": 6}
EXIT_HANDLER_ENTRY = 0x7F00_0000_1000
IO_VCPUID_BASE = 1 << 16
GRANT_EXTENSION = 512 * MiB
ERR_UNKNOWN_HYPERCALL = (1 << 64) - 1  # -1 in the guest's a0
S1_ARENA = 1 * MiB
DRIVER_ARENA = 1 * MiB


class BootError(RuntimeError):
    pass


class HypervisorPanic(RuntimeError):
    pass


@dataclass
class DeviceConfig:
    kind: str
    name: str
    irq: int = 0
    vcpu: int = 0
    ring_size: int = 256
    packets: list | None = None
    image_path: str | None = None
    backlog: int = 64


@dataclass
class VmConfig:
    vcpu_count: int
    memory_bytes: int
    programs: list[GuestProgram]
    devices: list[DeviceConfig] = field(default_factory=list)
    mmio_layout: dict[str, int] = field(default_factory=dict)
    vcpu_cores: list[int] | None = None
    io_cores: list[int] | None = None
    grant_bytes: int | None = None
    deleg_mask: int = ALL_DELEGATABLE_MASK

    def __post_init__(self) -> None:
        if self.vcpu_count < 1:
            raise ValueError("vcpu_count must be >= 1")
        if self.memory_bytes <= 0 or self.memory_bytes % PAGE_SIZE:
            raise ValueError("memory_bytes must be a positive page multiple")
        if self.memory_bytes > MMIO_BASE:
            raise ValueError("guest RAM overlaps the MMIO hole")
        if len(self.programs) == 1 and self.vcpu_count > 1:
            self.programs = self.programs * self.vcpu_count
        if len(self.programs) != self.vcpu_count:
            raise ValueError("need one guest program per vCPU")
        if self.vcpu_cores is None:
            self.vcpu_cores = list(range(self.vcpu_count))
        if len(set(self.vcpu_cores)) != self.vcpu_count:
            raise ValueError("each vCPU needs its own core")
        for i, d in enumerate(self.devices):
            self.mmio_layout.setdefault(d.name, MMIO_BASE + i * WINDOW_SIZE)
            if not d.irq:
                d.irq = DEFAULT_IRQS[d.kind]
        spans = sorted((base, base + WINDOW_SIZE, n) for n, base in self.mmio_layout.items())
        for b, e, n in spans:
            if b < self.memory_bytes or b % PAGE_SIZE:
                raise ValueError(f"MMIO window {n} at {b:#x} overlaps RAM or is unaligned")
        for (_, e0, n0), (b1, _, n1) in zip(spans, spans[1:]):
            if b1 < e0:
                raise ValueError(f"MMIO windows {n0} and {n1} overlap")
        if self.io_cores is None:
            nio = sum(1 for d in self.devices if d.kind != "console")
            first = max(self.vcpu_cores) + 1
            self.io_cores = list(range(first, first + nio))

    @property
    def guest_limit(self) -> int:
        """Highest GPA usable by the guest image (arenas sit above it)."""
        return self.memory_bytes - S1_ARENA - DRIVER_ARENA

    @property
    def all_cores(self) -> tuple[int, ...]:
        return tuple(dict.fromkeys(self.vcpu_cores + self.io_cores))


@dataclass
class VcpuState:
    vcpuid: int
    cpu: GuestCpu
    core_id: int
    runnable: bool = True
    state_area: int = 0
    # bit -> (source, step) of the latest poster
    senders: dict[int, tuple[str, int]] = field(default_factory=dict)
    halted: bool = False
    aborted: str | None = None

    def post(self, irq: int, source: str, now: int) -> None:
        if not 0 <= irq < 64:
            raise ValueError(f"virtual irq {irq} out of range")
        self.state_area |= 1 << irq
        self.senders[irq] = (source, now)

    def drain(self) -> int:
        bits, self.state_area = self.state_area, 0
        self.senders.clear()
        return bits

    @property
    def finished(self) -> bool:
        return self.halted or self.aborted is not None


class GpaAllocator:
    """Hands out grant pages: guest data from the front of each grant,
    stage-2 node pages from the back."""

    def __init__(self):
        self.grants: list[RegionGrant] = []
        self._front: list[int] = []
        self._back: list[int] = []
        self.issued: set[int] = set()

    def add_grant(self, g: RegionGrant) -> None:
        self.grants.append(g)
        self._front.append(0)
        self._back.append(g.size)

    @property
    def total(self) -> int:
        return sum(g.size for g in self.grants)

    @property
    def offset(self) -> int:
        return sum(f + (g.size - b) for g, f, b in zip(self.grants, self._front, self._back))

    def _take(self, back: bool) -> int | None:
        for i, g in enumerate(self.grants):
            if self._front[i] < self._back[i]:
                if back:
                    self._back[i] -= PAGE_SIZE
                    hpa = g.hpa_base + self._back[i]
                else:
                    hpa = g.hpa_base + self._front[i]
                    self._front[i] += PAGE_SIZE
                assert hpa not in self.issued
                self.issued.add(hpa)
                return hpa
        return None

    def alloc_page(self) -> int | None:
        return self._take(back=False)

    def alloc_node(self) -> int | None:
        return self._take(back=True)


_EXIT_REASONS = {int(r): r for r in ExitReason}


class Phase(enum.Enum):
    GUEST = "guest"
    DISPATCH = "dispatch"
    RESUME = "resume"
    BLOCKED = "blocked"
    DONE = "done"


class VThread:
    """Actor driving one vCPU: guest steps while in V, exit handling in HU."""

    daemon = False

    def __init__(self, hv: "DuVisor", vcpu: VcpuState):
        self.hv = hv
        self.vcpu = vcpu
        self.pid = hv.pid
        self.core_id = vcpu.core_id
        self.core = hv.machine.platform.cores[vcpu.core_id]
        self.hw_ctx = HwContext(PrivilegeMode.HU)
        self.phase = Phase.RESUME

    def __repr__(self) -> str:
        return f"VThread(vm={self.pid}, vcpu={self.vcpu.vcpuid}, {self.phase.value})"

    def runnable(self, now: int) -> bool:
        p = self.phase
        return p is not Phase.BLOCKED and p is not Phase.DONE

    def step(self, m) -> None:
        hv = self.hv
        core = self.core
        if core.mode is PrivilegeMode.V:
            cpu = self.vcpu.cpu
            try:
                eff = cpu.step(core, hv.s2, m.mem, m.now)
            except HardwareTrap:
                return
            except GuestCrash as exc:
                # the guest kernel panics: it halts through the hypercall path
                core.route_trap(ExitReason.HYPERCALL, HC_HALT)
                hv.guest_abort(self, str(exc))
                return
            if eff is StepEffect.EXIT and core.mode is PrivilegeMode.HU:
                self.phase = Phase.DISPATCH
        elif core.mode is PrivilegeMode.HU:
            if self.phase is Phase.RESUME:
                hv.resume(self)
            else:
                hv.dispatch(self)


class IoThread:
    """Actor servicing every queue of one backend device."""

    daemon = True

    def __init__(self, hv: "DuVisor", dev: BackendDevice, core_id: int, tid: int):
        self.hv = hv
        self.dev = dev
        self.pid = hv.pid
        self.core_id = core_id
        self.core = hv.machine.platform.cores[core_id]
        self.tid = tid
        self.hw_ctx = HwContext(PrivilegeMode.HU)
        self._woken = False
        self._net = isinstance(dev, NetDevice)
        dev.io_thread = self
        self.gmem = GuestMemoryAccess(
            lambda: self.core, None, hv.machine.mem, fixup=hv.backend_fixup
        )

    def __repr__(self) -> str:
        return f"IoThread(vm={self.pid}, {self.dev.name})"

    def wake(self) -> None:
        self._woken = True

    def runnable(self, now: int) -> bool:
        if self._woken:
            return not self.hv.halted
        dev = self.dev
        if self._net:
            rx, tx = dev.queues
            if tx.kicked or rx.kicked:
                return not self.hv.halted
            if dev.backlog and len(rx):
                return not self.hv.halted
            src = dev.source
            if src is not None and src.pos < len(src.schedule) and src.schedule[src.pos].cycle <= now:
                return not self.hv.halted
            return False
        for q in dev.queues:
            if q.kicked:
                return not self.hv.halted
        return False

    def next_event(self) -> int | None:
        if self.hv.halted or not isinstance(self.dev, NetDevice):
            return None
        src = self.dev.source
        if src is None or src.exhausted:
            return None
        return src.schedule[src.pos].cycle

    def step(self, m) -> None:
        core = self.core
        if core.mode is not PrivilegeMode.HU:
            return
        self._woken = False
        self.gmem.s2 = self.hv.s2
        audit: list = []
        self.gmem.audit = audit
        dev = self.dev
        try:
            if isinstance(dev, NetDevice):
                n = backend_rx_poll(dev, self.gmem, m.now)
                if dev.queues[NetDevice.TX].kicked:
                    backend_tx_drain(dev, self.gmem)
            elif isinstance(dev, BlkDevice):
                n = backend_blk_drain(dev, self.gmem)
            else:
                n = 0
        except BackendFault as e:
            # backend accesses are guest-derived; a violation is the VM's fault
            try:
                core.route_trap(ExitReason.PMC_FAULT, e.fault.addr)
            except HardwareTrap:
                pass
            return
        except HardwareTrap:
            return
        if audit:
            m.emit("backend_dma", self.core_id, device=dev.name, count=n, accesses=audit)


class DuVisor:
    """One VM. Call :meth:`enable`, :meth:`request_memory`, then :meth:`vm_boot`."""

    def __init__(self, machine, config: VmConfig, name: str = "vm"):
        self.machine = machine
        self.config = config
        self.name = name
        self.pid = machine.cp.spawn(config.all_cores)
        self.vmid = 0
        self.allocator = GpaAllocator()
        self.s2: StageTwoPageTable | None = None
        self.vcpus: list[VcpuState] = []
        self.vthreads: list[VThread] = []
        self.io_threads: list[IoThread] = []
        self.devices: dict[str, BackendDevice] = {}
        self._irq_devices: dict[int, BackendDevice] = {}
        self.drivers: dict[str, GuestNetDriver] = {}
        self.booted = False
        self.halted = False
        self.panic_reason: str | None = None
        self.extensions = 0
        self._gmem: dict[int, GuestMemoryAccess] = {}
        machine.register_vm(self)

    # -- control-plane calls -------------------------------------------------

    def enable(self) -> int:
        self.vmid = self.machine.cp.ioctl_enable_dv(self.pid, self.config.deleg_mask)
        return self.vmid

    def request_memory(self, size: int | None = None) -> RegionGrant:
        g = self.machine.cp.ioctl_alloc_region(self.pid, size or self.config.grant_bytes or self.config.memory_bytes)
        self.allocator.add_grant(g)
        return g

    @property
    def alive(self) -> bool:
        return self.machine.cp.processes[self.pid].alive

    # -- boot ------------------------------------------------------------------

    def vm_boot(self) -> None:
        m = self.machine
        cfg = self.config
        proc = m.cp.processes[self.pid]
        if not proc.dv_enabled:
            raise BootError("DV-Ext is not enabled for this process")
        if not proc.grants:
            raise BootError("no memory region granted")
        for prog in cfg.programs:
            if prog.image_end > cfg.guest_limit:
                raise BootError(f"guest image ends at {prog.image_end:#x}, beyond {cfg.guest_limit:#x}")
        for c in cfg.all_cores:
            if m.platform.cores[c].owner_pid != self.pid:
                raise BootError(f"core {c} is not owned by this process")
        root = self.allocator.alloc_node()
        self.s2 = StageTwoPageTable(m.mem, root, node_alloc=self._alloc_node)

        for prog in cfg.programs:
            for gpa, blob in prog.data:
                self._host_write(gpa, blob)

        s1_base = cfg.memory_bytes - S1_ARENA
        for i in range(cfg.vcpu_count):
            prog = cfg.programs[i]
            if prog.s1_mode == "bare":
                s1, pool = StageOnePageTable(), None
            else:
                slice_ = S1_ARENA // cfg.vcpu_count // PAGE_SIZE * PAGE_SIZE
                base = s1_base + i * slice_
                s1, pool = StageOnePageTable(base), NodePool(base + PAGE_SIZE, base + slice_)
            cpu = GuestCpu(prog, s1, pool)
            vcpu = VcpuState(i, cpu, cfg.vcpu_cores[i])
            cpu.irq_hook = lambda irq, v=vcpu: self.on_guest_irq(v, irq)
            self.vcpus.append(vcpu)
            core = m.platform.cores[vcpu.core_id]
            core.mode = PrivilegeMode.HU
            core.csr_write("hu_ehb", EXIT_HANDLER_ENTRY)
            core.csr_write("hu_vcpuid", i)
            core.csr_write("hu_vpc", GUEST_PC_BASE)
            vt = VThread(self, vcpu)
            self.vthreads.append(vt)
            m.cp.add_entity(vcpu.core_id, vt)

        io_iter = iter(cfg.io_cores)
        driver_base = cfg.memory_bytes - S1_ARENA - DRIVER_ARENA
        for dc in cfg.devices:
            kw = {"ring_size": dc.ring_size, "target_vcpu": dc.vcpu}
            if dc.kind == "net":
                # schedule cycles count from boot
                src = PacketSource([Packet(p.cycle + m.now, p.length, p.seed) for p in dc.packets or []])
                kw.update(backlog=dc.backlog, source=src)
            elif dc.kind == "blk":
                kw.update(image_path=dc.image_path)
            else:
                kw = {}
            dev = make_device(dc.kind, dc.name, cfg.mmio_layout[dc.name], dc.irq, **kw)
            dev.notifier = self._notify
            self.devices[dc.name] = dev
            self._irq_devices.setdefault(dev.irq, dev)
            if dc.kind == "console":
                continue
            core_id = next(io_iter)
            core = m.platform.cores[core_id]
            core.mode = PrivilegeMode.HU
            tid = len(self.io_threads)
            core.csr_write("hu_vcpuid", IO_VCPUID_BASE + tid)
            t = IoThread(self, dev, core_id, tid)
            self.io_threads.append(t)
            m.cp.add_entity(core_id, t)
            if dc.kind == "net":
                drv = GuestNetDriver(dev, driver_base, min(dc.ring_size, DRIVER_ARENA // 2048))
                for gpa in range(driver_base, driver_base + DRIVER_ARENA, PAGE_SIZE):
                    self._map_ram(gpa)
                drv.post_all()
                self.drivers[dc.name] = drv
        self.booted = True
        m.emit("boot_done", cfg.vcpu_cores[0], vm=self.name)

    def _alloc_node(self) -> int:
        hpa = self.allocator.alloc_node()
        if hpa is None:
            self._extend()
            hpa = self.allocator.alloc_node()
        if hpa is None:
            raise HypervisorPanic("out of memory for stage-2 nodes")
        return hpa

    def _extend(self) -> bool:
        try:
            self.request_memory(GRANT_EXTENSION)
        except CpError:
            return False
        self.extensions += 1
        return True

    def _alloc_page(self) -> int | None:
        hpa = self.allocator.alloc_page()
        if hpa is None and self._extend():
            hpa = self.allocator.alloc_page()
        return hpa

    def _map_ram(self, gpa: int) -> int | None:
        page = gpa & ~(PAGE_SIZE - 1)
        hit = self.s2.entries.get(page >> 12)
        if hit is not None:
            return hit[0] << 12
        hpa = self._alloc_page()
        if hpa is None:
            return None
        self.s2.map(page, hpa, Perm.RWX)
        return hpa

    def _host_write(self, gpa: int, data: bytes) -> None:
        pos = 0
        while pos < len(data):
            g = gpa + pos
            n = min(len(data) - pos, PAGE_SIZE - (g & 0xFFF))
            hpa = self._map_ram(g)
            if hpa is None:
                raise BootError("out of memory while loading the guest image")
            self.machine.mem.write(hpa | (g & 0xFFF), data[pos : pos + n])
            pos += n

    # -- exit dispatch ---------------------------------------------------------

    def dispatch(self, vt: VThread) -> None:
        core = vt.core
        er = core.csr_read("hu_er")
        info = core.csr_read("hu_einfo")
        reason = _EXIT_REASONS.get(er)
        self.machine.emit("dispatch", vt.core_id, reason=reason._name_ if reason is not None else er)
        if reason in S2PF_REASONS:
            self.handle_s2pf(vt, info)
        elif reason is ExitReason.HYPERCALL:
            self.handle_hypercall(vt, info, vt.vcpu.cpu.regs[REG_A0])
        elif reason is ExitReason.SENSITIVE_WFI:
            self.handle_wfi(vt)
        elif reason is ExitReason.UIPI:
            vt.phase = Phase.RESUME
        else:
            self.panic(f"unexpected exit code {er}")

    def resume(self, vt: VThread) -> None:
        core = vt.core
        bits = vt.vcpu.drain()
        if bits:
            core.csr_write("hu_vitr", core.csr_read("hu_vitr") | bits)
            self.machine.emit("inject", vt.core_id, bits=bits)
        vt.phase = Phase.GUEST
        if core.huret() is not None:
            vt.phase = Phase.DISPATCH

    def _advance(self, vt: VThread) -> None:
        core = vt.core
        core.csr_write("hu_vpc", core.csr_read("hu_vpc") + 4)
        vt.vcpu.cpu.retired += 1

    def device_at(self, gpa: int) -> BackendDevice | None:
        for dev in self.devices.values():
            if dev.window <= gpa < dev.window + WINDOW_SIZE:
                return dev
        return None

    def handle_s2pf(self, vt: VThread, gpa: int) -> None:
        dev = self.device_at(gpa)
        if dev is not None:
            self.handle_mmio(vt, dev, gpa)
            return
        if not 0 <= gpa < self.config.memory_bytes:
            self.guest_abort(vt, f"access to unbacked GPA {gpa:#x}")
            return
        page = gpa & ~(PAGE_SIZE - 1)
        if (page >> 12) not in self.s2.entries:
            hpa = self._alloc_page()
            if hpa is None:
                self.guest_abort(vt, "out of memory")
                return
            self.machine.emit("alloc", vt.core_id, gpa=page, hpa=hpa)
            self.s2.map(page, hpa, Perm.RWX)
            self.machine.emit("s2_map", vt.core_id, gpa=page, hpa=hpa)
        vt.phase = Phase.RESUME

    def handle_mmio(self, vt: VThread, dev: BackendDevice, gpa: int) -> int | None:
        core = vt.core
        cpu = vt.vcpu.cpu
        cpu.pc = core.csr_read("hu_vpc")
        ins = cpu.current()
        if ins is None or ins.op not in MEMORY_OPS:
            self.guest_abort(vt, f"cannot decode MMIO access at {cpu.pc:#x}")
            return None
        if not dev.contains(gpa, ins.width):
            self.guest_abort(vt, f"{ins.width}-byte MMIO at {gpa:#x} straddles {dev.name}")
            return None
        mask = (1 << (8 * ins.width)) - 1
        off = gpa - dev.window
        value = None
        if ins.is_load:
            value = dev.mmio_read(off, ins.width) & mask
            cpu.regs[ins.reg] = value
        else:
            dev.mmio_write(off, ins.width, cpu.regs[ins.reg] & mask)
        self.machine.emit("mmio", vt.core_id, device=dev.name, offset=off,
                          access="load" if ins.is_load else "store")
        self._advance(vt)
        vt.phase = Phase.RESUME
        return value

    def handle_hypercall(self, vt: VThread, nr: int, arg: int) -> int:
        cpu = vt.vcpu.cpu
        if nr == HC_HALT:
            self.machine.emit("halt", vt.core_id, vcpu=vt.vcpu.vcpuid)
            self._finish(vt, halted=True)
            return 0
        if nr == HC_VIPI:
            self.machine.emit("vipi_insert", vt.core_id, target=arg)
            if 0 <= arg < len(self.vcpus):
                self.inject_virq(arg, IPI_IRQ, f"vcpu{vt.vcpu.vcpuid}", vt.core_id)
                ret = 0
            else:
                ret = ERR_UNKNOWN_HYPERCALL
        else:
            self.machine.emit("hypercall", vt.core_id, nr=nr)
            ret = 0 if nr == HC_NULL else ERR_UNKNOWN_HYPERCALL
        cpu.regs[REG_A0] = ret
        self._advance(vt)
        vt.phase = Phase.RESUME
        return ret

    def handle_wfi(self, vt: VThread) -> None:
        self._advance(vt)
        if vt.vcpu.state_area:
            vt.phase = Phase.RESUME
        else:
            vt.vcpu.runnable = False
            vt.phase = Phase.BLOCKED
            self.machine.emit("wfi_block", vt.core_id)

    # -- interrupts ----------------------------------------------------------------

    def vcpu_in_guest(self, vcpu: VcpuState) -> bool:
        core = self.machine.platform.cores[vcpu.core_id]
        return (
            core.owner_pid == self.pid
            and core.mode is PrivilegeMode.V
            and core.regs.hu_vcpuid == vcpu.vcpuid
        )

    def inject_virq(self, target: int, irq: int, source: str, sender_core: int) -> None:
        vcpu = self.vcpus[target]
        if vcpu.finished:
            return
        vcpu.post(irq, source, self.machine.now)
        vt = self.vthreads[target]
        if vt.phase is Phase.BLOCKED:
            vcpu.runnable = True
            vt.phase = Phase.RESUME
            self.machine.emit("wake", sender_core, target=target)
        elif self.vcpu_in_guest(vcpu):
            try:
                r = self.machine.platform.husuipi(sender_core, target)
            except HardwareTrap:
                self.panic(f"HUSUIPI to own vCPU {target} faulted")
                return
            self.machine.emit("husuipi", sender_core, target=target, result=r.value)

    def _notify(self, dev: BackendDevice) -> None:
        t = dev.io_thread
        core_id = t.core_id if t is not None else self.config.vcpu_cores[0]
        self.machine.emit("io_notify", core_id, device=dev.name, irq=dev.irq)
        self.inject_virq(dev.target_vcpu, dev.irq, dev.name, core_id)

    def on_guest_irq(self, vcpu: VcpuState, irq: int) -> None:
        dev = self._irq_devices.get(irq)
        if dev is None:
            self.machine.emit("guest_ipi_ack", vcpu.core_id, irq=irq)
            return
        drv = self.drivers.get(dev.name)
        if drv is not None:
            drv.on_irq(self._guest_mem(vcpu))
        else:
            dev.int_status = 0
        self.machine.emit("guest_irq", vcpu.core_id, irq=irq, device=dev.name)

    def _guest_mem(self, vcpu: VcpuState) -> GuestMemoryAccess:
        gm = self._gmem.get(vcpu.vcpuid)
        if gm is None:
            core = self.machine.platform.cores[vcpu.core_id]
            gm = self._gmem[vcpu.vcpuid] = GuestMemoryAccess(lambda: core, self.s2, self.machine.mem)
        return gm

    def backend_fixup(self, gpa: int) -> bool:
        if not 0 <= gpa < self.config.memory_bytes:
            return False
        return self._map_ram(gpa) is not None

    # -- termination ---------------------------------------------------------------

    def _finish(self, vt: VThread, halted: bool = False, reason: str | None = None) -> None:
        if halted:
            vt.vcpu.halted = True
        else:
            vt.vcpu.aborted = reason
        vt.vcpu.runnable = False
        vt.phase = Phase.DONE
        if all(v.finished for v in self.vcpus):
            self.halted = True
            for dev in self.devices.values():
                if isinstance(dev, BlkDevice):
                    flush_blk_image(dev)
            self.machine.emit("vm_halt", vt.core_id, vm=self.name)

    def guest_abort(self, vt: VThread, reason: str) -> None:
        self.machine.emit("guest_abort", vt.core_id, reason=reason)
        log.info("%s vcpu%d aborted: %s", self.name, vt.vcpu.vcpuid, reason)
        self._finish(vt, reason=reason)

    def panic(self, reason: str) -> None:
        self.panic_reason = reason
        self.halted = True
        for vt in self.vthreads:
            vt.phase = Phase.DONE
        self.machine.cp.kill(self.pid, f"hypervisor panic: {reason}")
        raise HypervisorPanic(reason)
