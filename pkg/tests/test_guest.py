from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from duvisor_sim.guest import (
    GUEST_PC_BASE,
    HC_VIPI,
    AssemblyError,
    NodePool,
    Op,
    assemble,
    disassemble,
)
from duvisor_sim.hypervisor import MMIO_BASE
from duvisor_sim.mmu.memory import PAGE_SIZE
from duvisor_sim.mmu.pmc import Perm

from simkit import boot_guest, console


def ops(src: str, params=None) -> list[Op]:
    return [i.op for i in assemble(src, params).instructions]


def run_counting(src: str, **kw):
    """Run to completion; returns (machine, vm, number of guest step calls)."""
    m, vm = boot_guest(src, **kw)
    cpu = vm.vcpus[0].cpu
    calls = [0]
    orig = cpu.step

    def step(*a, **k):
        calls[0] += 1
        return orig(*a, **k)

    cpu.step = step
    assert m.run(200_000) == "halted"
    return m, vm, calls[0]


# -- assembler ---------------------------------------------------------------------


def test_basic_encoding():
    p = assemble("LI r1, 0x10\nLOAD [r1+8], r2\nSTORE 0x2000, r3, 2\nMMIO_LOAD 0x10000000, r4\nHALT")
    li, ld, st_, mm, halt = p.instructions
    assert (li.op, li.reg, li.addr) == (Op.LI, 1, 0x10)
    assert (ld.base, ld.addr, ld.reg, ld.width) == (1, 8, 2, 8)
    assert (st_.base, st_.addr, st_.width) == (None, 0x2000, 2)
    assert mm.width == 4
    assert halt.op is Op.HALT


def test_semicolons_comments_and_braces_on_one_line():
    assert ops("NOP; NOP # trailing; HALT\nLOOP 2 { NOP }") == [Op.NOP, Op.NOP, Op.LOOP, Op.NOP, Op.END]


def test_send_vipi_is_hypercall_sugar():
    (ins,) = assemble("SEND_VIPI 3").instructions
    assert (ins.op, ins.addr, ins.width) == (Op.HYPERCALL, HC_VIPI, 3)


def test_loop_links_to_end():
    p = assemble("LOOP 2 {\n LOOP 3 {\n NOP\n }\n}\nHALT")
    outer, inner, _, inner_end, outer_end, _ = p.instructions
    assert (outer.count, outer.target) == (2, 4) and outer_end.target == 0
    assert (inner.count, inner.target) == (3, 3) and inner_end.target == 1


def test_params_fill_templates():
    assert assemble("LOOP $n {\n NOP\n}", {"n": 7}).instructions[0].count == 7
    with pytest.raises(AssemblyError, match="missing parameter"):
        assemble("LOOP $n {\n}", {"m": 1})


def test_directives():
    p = assemble(".s1 demand\n.map 0x400000 0x200000 r-x\n.data 0x3000 0102ff\nHALT")
    assert p.s1_mode == "demand"
    assert p.s1_maps == ((0x400000, 0x200000, Perm.R | Perm.X),)
    assert p.data == ((0x3000, b"\x01\x02\xff"),)
    assert p.image_end == 0x3003
    assert assemble(".map 0x1000 0x1000 rw").s1_mode == "explicit"
    assert assemble("HALT").s1_mode == "bare"


@pytest.mark.parametrize("src, line", [
    ("NOP\nFROB r1", 2),
    ("LI r16, 1", 1),
    ("LOAD 0x8000000000, r1", 1),
    ("LOAD 0x1000, r1, 3", 1),
    ("NOP\n\nLI r1", 3),
    ("LOOP -1 {\n}", 1),
    ("LOOP 2\nNOP", 2),
    ("}", 1),
    ("{", 1),
    ("NOP\nLOOP 2 {\nNOP", 2),
    (".s1 paged", 1),
    (".map 0x1001 0x1000 rw", 1),
    (".map 0x1000 0x1000 rq", 1),
    (".data 0x1000 zz", 1),
    ("LI r1, banana", 1),
    ("LOAD [r20], r1", 1),
])
def test_errors_carry_line_numbers(src, line):
    with pytest.raises(AssemblyError) as e:
        assemble(src)
    assert e.value.line == line
    assert str(e.value).startswith(f"line {line}:")


# -- round trip ----------------------------------------------------------------------

_reg = st.integers(0, 15).map(lambda r: f"r{r}")
_imm = st.integers(0, (1 << 39) - 1).map(hex)
_width = st.sampled_from(["", ", 1", ", 2", ", 4", ", 8"])
_where = st.one_of(_imm, st.tuples(_reg, st.integers(0, 4096)).map(lambda t: f"[{t[0]}+{t[1]}]"))
_simple = st.one_of(
    st.sampled_from(["NOP", "WFI", "IRQ_ACK", "HALT"]),
    st.builds(lambda r, v: f"LI {r}, {v}", _reg, _imm),
    st.builds(lambda r, v: f"ADDI {r}, {v}", _reg, _imm),
    st.builds(lambda m, a, r, w: f"{m} {a}, {r}{w}",
              st.sampled_from(["LOAD", "STORE", "MMIO_LOAD", "MMIO_STORE"]), _where, _reg, _width),
    st.builds(lambda n, a: f"HYPERCALL {n}, {a}", st.integers(0, 9), st.integers(0, 99)),
)


def _block(children):
    return st.builds(lambda n, body: f"LOOP {n} {{\n" + "\n".join(body) + "\n}",
                     st.integers(0, 50), st.lists(children, max_size=4))


_stmt = st.recursive(_simple, _block, max_leaves=12)
_page = st.integers(0, 1 << 20).map(lambda p: hex(p * PAGE_SIZE))
_header = st.lists(st.builds(lambda a, b, p: f".map {a} {b} {p}", _page, _page,
                             st.sampled_from(["r", "rw", "rwx", "r-x", "---"])), max_size=3)


@given(_header, st.booleans(), st.lists(_stmt, max_size=10),
       st.lists(st.tuples(_page, st.binary(min_size=1, max_size=8)), max_size=2))
def test_disassemble_round_trips(maps, demand, body, data):
    lines = ([".s1 demand"] if demand else []) + maps
    lines += [f".data {a} {b.hex()}" for a, b in data] + body
    prog = assemble("\n".join(lines))
    text = disassemble(prog)
    assert assemble(text) == prog
    assert disassemble(assemble(text)) == text


# -- execution -----------------------------------------------------------------------


def test_loop_runs_body_count_times():
    _, vm, _ = run_counting("LI r1, 0\nLOOP 5 {\n ADDI r1, 1\n}\nHALT")
    assert vm.vcpus[0].cpu.regs[1] == 5


def test_nested_loops_multiply():
    _, vm, _ = run_counting("LOOP 3 {\n LOOP 4 {\n ADDI r1, 1\n }\n ADDI r2, 1\n}\nHALT")
    regs = vm.vcpus[0].cpu.regs
    assert (regs[1], regs[2]) == (12, 3)


def test_zero_count_loop_is_skipped():
    _, vm, _ = run_counting("LOOP 0 {\n ADDI r1, 1\n}\nADDI r2, 1\nHALT")
    assert vm.vcpus[0].cpu.regs[1:3] == [0, 1]


def test_loop_control_costs_no_steps():
    # LI + 5 ADDI + the halting step; LOOP and END never take a step of their own
    _, _, steps = run_counting("LI r1, 0\nLOOP 5 {\n ADDI r1, 1\n}\nHALT")
    assert steps == 7
    _, _, flat = run_counting("LI r1, 0\n" + "ADDI r1, 1\n" * 5 + "HALT")
    assert flat == steps


def test_register_indirect_store_and_load():
    src = ".s1 bare\nLI r1, 0x200000\nLI r2, 0x1122334455667788\nSTORE [r1+4], r2, 4\nLOAD [r1+4], r3, 2\nHALT"
    _, vm, _ = run_counting(src)
    assert vm.vcpus[0].cpu.regs[3] == 0x7788


def test_explicit_stage1_mapping_reads_through():
    src = ".map 0x400000 0x200000 rw\n.data 0x200010 2a\nLOAD 0x400010, r1, 1\nHALT"
    _, vm, _ = run_counting(src)
    cpu = vm.vcpus[0].cpu
    assert cpu.regs[1] == 0x2A
    assert cpu.s1.entries == {0x400: (0x200, Perm.RW)}


def test_demand_stage1_is_identity():
    src = ".s1 demand\n.data 0x250000 07\nLOAD 0x250000, r1, 1\nLOAD 0x250001, r2, 1\nHALT"
    _, vm, _ = run_counting(src)
    cpu = vm.vcpus[0].cpu
    assert cpu.regs[1] == 7
    assert cpu.s1.entries == {0x250: (0x250, Perm.RWX)}


def test_stage1_fixups_stay_inside_the_guest():
    src = ".s1 demand\nLI r1, 0x300000\nLOOP 8 {\n LOAD [r1], r2\n ADDI r1, 0x1000\n}\nHALT"
    m, vm, _ = run_counting(src)
    cpu = vm.vcpus[0].cpu
    # a fixup whose node write hits an S2 fault is retried, so faults >= pages
    assert set(cpu.s1.entries) == {0x300 + i for i in range(8)} and cpu.s1_faults >= 8
    reasons = [e.info["reason"] for e in m.trace if e.kind == "exit"]
    assert all(r.startswith("S2PF") or r == "HYPERCALL" for r in reasons)


def test_unmapped_gva_without_policy_aborts_the_vcpu():
    _, vm, _ = run_counting(".map 0x400000 0x200000 rw\nLOAD 0x500000, r1\nHALT")
    assert "no stage-1 policy" in vm.vcpus[0].aborted


def test_running_off_the_end_halts():
    _, vm, _ = run_counting("NOP")
    assert vm.vcpus[0].halted


def test_narrow_mmio_store_reaches_the_device():
    src = f"LI r1, 0x4241\nMMIO_STORE {MMIO_BASE + 4:#x}, r1, 1\nHALT"
    m, vm, _ = run_counting(src, devices=[console()])
    assert bytes(vm.devices["console0"].output) == b"A"
    assert [e.info["offset"] for e in m.trace if e.kind == "mmio"] == [4]


def test_pc_advances_by_four():
    m, vm = boot_guest("NOP\nNOP\nHALT")
    m.run()
    assert vm.vcpus[0].cpu.retired == 2
    assert vm.vcpus[0].cpu.pc == GUEST_PC_BASE + 8


def test_node_pool():
    pool = NodePool(0x1000, 0x3000)
    assert pool.peek() == pool.take() == 0x1000
    assert pool.take() == 0x2000
    with pytest.raises(MemoryError):
        pool.take()
