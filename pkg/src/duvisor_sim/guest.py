"""A tiny deterministic guest: mini-ISA, assembler, disassembler and the
per-instruction semantics that drive the MMU and VM exits.

Syntax, one statement per line or separated by ``;``::

    .s1 bare|demand           # stage-1 off, or identity-mapped on demand
    .map GVA GPA rwx          # explicit stage-1 mapping (implies paged S1)
    .data GPA HEXBYTES        # bytes loaded into guest RAM at boot
    LI r1, 0x1000
    ADDI r1, 4096
    LOAD 0x2000, r2 [, width]     LOAD [r1+8], r2 [, width]
    STORE 0x2000, r2 [, width]    STORE [r1], r2
    MMIO_LOAD 0x10000000, r2 [, width]
    MMIO_STORE 0x10000050, r2 [, width]
    HYPERCALL nr [, arg]
    SEND_VIPI target          # sugar for HYPERCALL 1, target
    WFI ; IRQ_ACK ; NOP ; HALT
    LOOP 100 { ... }
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from string import Template

from duvisor_sim.hw import ExitReason, PrivilegeMode
from duvisor_sim.mmu.memory import PAGE_SIZE
from duvisor_sim.mmu.pagetable import ADDR_LIMIT, StageOnePageTable
from duvisor_sim.mmu.pmc import Access, Perm
from duvisor_sim.mmu.translate import Fault, FaultKind, s1_map, translate, translate_gpa

GUEST_PC_BASE = 0x8000_0000
N_REGS = 16
REG_A0 = 10

HC_NULL = 0
HC_VIPI = 1
HC_HALT = 2


class Op(enum.Enum):
    NOP = "NOP"
    LI = "LI"
    ADDI = "ADDI"
    LOAD = "LOAD"
    STORE = "STORE"
    MMIO_LOAD = "MMIO_LOAD"
    MMIO_STORE = "MMIO_STORE"
    HYPERCALL = "HYPERCALL"
    WFI = "WFI"
    IRQ_ACK = "IRQ_ACK"
    LOOP = "LOOP"
    END = "END"
    HALT = "HALT"


MEMORY_OPS = (Op.LOAD, Op.STORE, Op.MMIO_LOAD, Op.MMIO_STORE)


@dataclass(frozen=True)
class Instr:
    """``addr``/``base`` address memory ops (``base`` is a register or None),
    ``reg`` is the data register, ``width`` the access size in bytes."""

    op: Op
    addr: int = 0
    reg: int = 0
    width: int = 0
    base: int | None = None
    # LOOP: count and index of its END; END: index of its LOOP
    count: int = 0
    target: int = 0

    @property
    def is_load(self) -> bool:
        return self.op in (Op.LOAD, Op.MMIO_LOAD)


@dataclass(frozen=True)
class GuestProgram:
    instructions: tuple[Instr, ...]
    s1_mode: str = "bare"
    s1_maps: tuple[tuple[int, int, Perm], ...] = ()
    data: tuple[tuple[int, bytes], ...] = ()

    @property
    def image_end(self) -> int:
        return max((gpa + len(b) for gpa, b in self.data), default=0)


class AssemblyError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


_MEM_RE = re.compile(r"^\[\s*r(\d+)\s*(?:\+\s*(\S+))?\s*\]$", re.I)


def _int(tok: str, line: int) -> int:
    try:
        return int(tok.replace("_", ""), 0)
    except ValueError:
        raise AssemblyError(line, f"bad number {tok!r}") from None


def _reg(tok: str, line: int) -> int:
    m = re.fullmatch(r"r(\d+)", tok.strip(), re.I)
    if not m or int(m.group(1)) >= N_REGS:
        raise AssemblyError(line, f"bad register {tok!r}")
    return int(m.group(1))


def _addr(tok: str, line: int) -> tuple[int, int | None]:
    m = _MEM_RE.match(tok.strip())
    if m:
        base = int(m.group(1))
        if base >= N_REGS:
            raise AssemblyError(line, f"bad register r{base}")
        off = _int(m.group(2), line) if m.group(2) else 0
        return off, base
    a = _int(tok, line)
    if not 0 <= a < ADDR_LIMIT:
        raise AssemblyError(line, f"address {a:#x} overflows the 39-bit guest space")
    return a, None


def _statements(source: str):
    for lineno, raw in enumerate(source.splitlines(), 1):
        text = raw.split("#", 1)[0]
        text = text.replace("{", ";{;").replace("}", ";};")
        for stmt in text.split(";"):
            stmt = stmt.strip()
            if stmt:
                yield lineno, stmt


def assemble(source: str, params: dict | None = None) -> GuestProgram:
    """Assemble ``source``; ``$name`` placeholders are filled from ``params``."""
    if params:
        try:
            source = Template(source).substitute({k: str(v) for k, v in params.items()})
        except KeyError as exc:
            raise AssemblyError(0, f"missing parameter {exc}") from None
    out: list[Instr] = []
    loops: list[tuple[int, int]] = []  # (index of LOOP, line)
    pending_loop: int | None = None
    s1_mode = "bare"
    maps: list[tuple[int, int, Perm]] = []
    data: list[tuple[int, bytes]] = []

    for line, stmt in _statements(source):
        if pending_loop is not None:
            if stmt != "{":
                raise AssemblyError(line, "LOOP needs a '{' body")
            pending_loop = None
            continue
        if stmt == "}":
            if not loops:
                raise AssemblyError(line, "unbalanced '}'")
            start, _ = loops.pop()
            out.append(Instr(Op.END, target=start))
            lp = out[start]
            out[start] = Instr(Op.LOOP, count=lp.count, target=len(out) - 1)
            continue
        if stmt == "{":
            raise AssemblyError(line, "stray '{'")
        head, _, rest = stmt.partition(" ")
        args = [a.strip() for a in rest.split(",")] if rest.strip() else []
        mnem = head.upper()

        def nargs(lo: int, hi: int | None = None) -> None:
            hi = lo if hi is None else hi
            if not lo <= len(args) <= hi:
                raise AssemblyError(line, f"{mnem} takes {lo}..{hi} operands, got {len(args)}")

        if mnem == ".S1":
            nargs(1)
            if args[0] not in ("bare", "demand"):
                raise AssemblyError(line, f"unknown .s1 mode {args[0]!r}")
            s1_mode = args[0]
        elif mnem == ".MAP":
            parts = rest.split()
            if len(parts) != 3:
                raise AssemblyError(line, ".map GVA GPA perms")
            perms = Perm.NONE
            for ch in parts[2]:
                if ch not in "rwx-":
                    raise AssemblyError(line, f"bad perm {ch!r}")
                perms |= {"r": Perm.R, "w": Perm.W, "x": Perm.X, "-": Perm.NONE}[ch]
            gva, gpa = _int(parts[0], line), _int(parts[1], line)
            if gva % PAGE_SIZE or gpa % PAGE_SIZE:
                raise AssemblyError(line, ".map addresses must be page aligned")
            maps.append((gva, gpa, perms))
        elif mnem == ".DATA":
            parts = rest.split()
            if len(parts) != 2:
                raise AssemblyError(line, ".data GPA HEX")
            try:
                blob = bytes.fromhex(parts[1])
            except ValueError:
                raise AssemblyError(line, "bad hex blob") from None
            data.append((_int(parts[0], line), blob))
        elif mnem in ("NOP", "WFI", "IRQ_ACK", "HALT"):
            nargs(0)
            out.append(Instr(Op[mnem]))
        elif mnem == "LI":
            nargs(2)
            out.append(Instr(Op.LI, reg=_reg(args[0], line), addr=_int(args[1], line)))
        elif mnem == "ADDI":
            nargs(2)
            out.append(Instr(Op.ADDI, reg=_reg(args[0], line), addr=_int(args[1], line)))
        elif mnem in ("LOAD", "STORE", "MMIO_LOAD", "MMIO_STORE"):
            nargs(2, 3)
            addr, base = _addr(args[0], line)
            width = _int(args[2], line) if len(args) == 3 else (4 if mnem.startswith("MMIO") else 8)
            if width not in (1, 2, 4, 8):
                raise AssemblyError(line, f"bad width {width}")
            out.append(Instr(Op[mnem], addr=addr, base=base, reg=_reg(args[1], line), width=width))
        elif mnem == "HYPERCALL":
            nargs(1, 2)
            arg = _int(args[1], line) if len(args) == 2 else 0
            out.append(Instr(Op.HYPERCALL, addr=_int(args[0], line), width=arg))
        elif mnem == "SEND_VIPI":
            nargs(1)
            out.append(Instr(Op.HYPERCALL, addr=HC_VIPI, width=_int(args[0], line)))
        elif mnem == "LOOP":
            nargs(1)
            count = _int(args[0], line)
            if count < 0:
                raise AssemblyError(line, "negative LOOP count")
            loops.append((len(out), line))
            out.append(Instr(Op.LOOP, count=count))
            pending_loop = len(out) - 1
        else:
            raise AssemblyError(line, f"unknown mnemonic {head!r}")
    if pending_loop is not None:
        raise AssemblyError(line, "LOOP without body")
    if loops:
        raise AssemblyError(loops[-1][1], "unterminated LOOP")
    if maps:
        s1_mode = "demand" if s1_mode == "demand" else "explicit"
    return GuestProgram(tuple(out), s1_mode, tuple(maps), tuple(data))


def _perm_str(p: Perm) -> str:
    return "".join(c if p & f else "-" for c, f in (("r", Perm.R), ("w", Perm.W), ("x", Perm.X)))


def disassemble(prog: GuestProgram) -> str:
    lines = []
    if prog.s1_mode == "demand":
        lines.append(".s1 demand")
    for gva, gpa, perms in prog.s1_maps:
        lines.append(f".map {gva:#x} {gpa:#x} {_perm_str(perms)}")
    for gpa, blob in prog.data:
        lines.append(f".data {gpa:#x} {blob.hex()}")
    depth = 0
    for ins in prog.instructions:
        pad = "    " * depth
        op = ins.op
        if op is Op.LOOP:
            lines.append(f"{pad}LOOP {ins.count} {{")
            depth += 1
        elif op is Op.END:
            depth -= 1
            lines.append("    " * depth + "}")
        elif op in (Op.LI, Op.ADDI):
            lines.append(f"{pad}{op.value} r{ins.reg}, {ins.addr:#x}")
        elif op in MEMORY_OPS:
            where = f"[r{ins.base}+{ins.addr:#x}]" if ins.base is not None else f"{ins.addr:#x}"
            lines.append(f"{pad}{op.value} {where}, r{ins.reg}, {ins.width}")
        elif op is Op.HYPERCALL:
            lines.append(f"{pad}HYPERCALL {ins.addr}, {ins.width:#x}")
        else:
            lines.append(pad + op.value)
    return "\n".join(lines) + "\n"


# -- execution --------------------------------------------------------------


class StepEffect(enum.Enum):
    RETIRED = "retired"
    EXIT = "exit"          # a trap left V mode
    S1_FIXUP = "s1fixup"   # the in-guest stage-1 stub ran; instruction retries
    HALTED = "halted"


class NodePool:
    """Bump allocator of guest-physical pages for stage-1 table nodes."""

    def __init__(self, base: int, limit: int):
        self.next = base
        self.limit = limit

    def peek(self) -> int:
        if self.next >= self.limit:
            raise MemoryError("guest S1 node pool exhausted")
        return self.next

    def take(self) -> int:
        a = self.peek()
        self.next += PAGE_SIZE
        return a


_S2PF = {Access.READ: ExitReason.S2PF_LOAD, Access.WRITE: ExitReason.S2PF_STORE,
         Access.EXECUTE: ExitReason.S2PF_FETCH}


@dataclass
class GuestCpu:
    """Architectural guest state: registers, loop counters and interrupt log.

    The program counter is the core's pc while resident; ``pc`` mirrors it.
    """

    program: GuestProgram
    s1: StageOnePageTable = field(default_factory=StageOnePageTable)
    node_pool: NodePool | None = None
    regs: list[int] = field(default_factory=lambda: [0] * N_REGS)
    pc: int = GUEST_PC_BASE
    loops: list[int] = field(default_factory=list)
    s1_faults: int = 0
    # (irq, step) for every IRQ_ACK that found something pending
    acks: list[tuple[int, int]] = field(default_factory=list)
    halted: bool = False
    retired: int = 0
    # called with (irq) when IRQ_ACK takes a device interrupt
    irq_hook: object = None

    def index(self) -> int:
        return (self.pc - GUEST_PC_BASE) >> 2

    def current(self) -> Instr | None:
        i = self.index()
        ins = self.program.instructions
        return ins[i] if 0 <= i < len(ins) else None

    def _resolve(self, ins: Instr) -> int:
        if ins.base is None:
            return ins.addr
        return (self.regs[ins.base] + ins.addr) & ((1 << 64) - 1)

    def _s1_fixup(self, core, s2, gva: int) -> Fault | None:
        """The in-guest S1 fault stub: install the mapping for ``gva``."""
        page = gva & ~(PAGE_SIZE - 1)
        for mgva, mgpa, perms in self.program.s1_maps:
            if mgva == page:
                return s1_map(core, self.s1, s2, page, mgpa, perms, self.node_pool)
        if self.program.s1_mode == "demand":
            return s1_map(core, self.s1, s2, page, page, Perm.RWX, self.node_pool)
        return Fault(FaultKind.S1_PAGE_FAULT, gva)

    def _trap_fault(self, core, fault: Fault) -> StepEffect:
        if fault.kind is FaultKind.PMC_VIOLATION:
            core.route_trap(ExitReason.PMC_FAULT, fault.addr)
        else:
            core.route_trap(_S2PF[fault.access], fault.addr)
        return StepEffect.EXIT

    def step(self, core, s2, mem, now: int = 0, audit: list | None = None) -> StepEffect:
        """Execute the instruction at the core's pc. Core must be in V."""
        assert core.mode is PrivilegeMode.V, "guest step outside V mode"
        self.pc = pc = core.pc
        i = (pc - GUEST_PC_BASE) >> 2
        prog = self.program.instructions
        ins = prog[i] if 0 <= i < len(prog) else None
        if ins is not None and (ins.op is Op.LOOP or ins.op is Op.END):
            ins = self._loop_control(core, ins)
        if ins is None or ins.op is Op.HALT:
            core.route_trap(ExitReason.HYPERCALL, HC_HALT)
            return StepEffect.EXIT
        op = ins.op
        if op in MEMORY_OPS:
            access = Access.READ if ins.is_load else Access.WRITE
            addr = self._resolve(ins)
            if op in (Op.LOAD, Op.STORE):
                r = translate(core, self.s1, s2, addr, access, ins.width, audit)
            else:
                r = translate_gpa(core, s2, addr, access, ins.width, audit)
            if isinstance(r, Fault):
                if r.kind is FaultKind.S1_PAGE_FAULT:
                    self.s1_faults += 1
                    fix = self._s1_fixup(core, s2, addr)
                    if fix is None:
                        return StepEffect.S1_FIXUP
                    if fix.kind is FaultKind.S1_PAGE_FAULT:
                        raise GuestCrash(f"unmapped GVA {addr:#x} with no stage-1 policy")
                    return self._trap_fault(core, fix)
                return self._trap_fault(core, r)
            if ins.is_load:
                self.regs[ins.reg] = int.from_bytes(mem.read(r, ins.width), "little")
            else:
                mask = (1 << (8 * ins.width)) - 1
                mem.write(r, (self.regs[ins.reg] & mask).to_bytes(ins.width, "little"))
        elif op is Op.HYPERCALL:
            self.regs[REG_A0] = ins.width
            core.route_trap(ExitReason.HYPERCALL, ins.addr)
            return StepEffect.EXIT
        elif op is Op.WFI:
            if not core.guest_pending:
                core.route_trap(ExitReason.SENSITIVE_WFI, 0)
                return StepEffect.EXIT
        elif op is Op.IRQ_ACK:
            if core.guest_pending:
                irq = core.guest_pending.bit_length() - 1
                core.guest_pending &= ~(1 << irq)
                self.acks.append((irq, now))
                if self.irq_hook is not None:
                    self.irq_hook(irq)
        elif op is Op.LI:
            self.regs[ins.reg] = ins.addr & ((1 << 64) - 1)
        elif op is Op.ADDI:
            self.regs[ins.reg] = (self.regs[ins.reg] + ins.addr) & ((1 << 64) - 1)
        self.retired += 1
        core.pc += 4
        self.pc = core.pc
        return StepEffect.RETIRED

    def _loop_control(self, core, ins: Instr) -> Instr | None:
        """Run LOOP/END bookkeeping at the pc without spending a step (a
        zero-overhead hardware loop); returns the first real instruction."""
        while ins is not None and (ins.op is Op.LOOP or ins.op is Op.END):
            self.retired += 1
            if ins.op is Op.LOOP:
                if ins.count == 0:
                    nxt = ins.target + 1
                else:
                    self.loops.append(ins.count)
                    nxt = self.index() + 1
            else:
                self.loops[-1] -= 1
                if self.loops[-1] > 0:
                    nxt = ins.target + 1
                else:
                    self.loops.pop()
                    nxt = self.index() + 1
            core.pc = GUEST_PC_BASE + 4 * nxt
            self.pc = core.pc
            ins = self.current()
        return ins


class GuestCrash(RuntimeError):
    pass
