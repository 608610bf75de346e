from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from duvisor_sim.hw import (
    ALL_DELEGATABLE_MASK,
    REGISTERS,
    TIMER_BIT,
    Destination,
    DvPlatform,
    ExitReason,
    HardwareTrap,
    PrivilegeMode,
    UipiResult,
    csr_access,
    exec_huret,
    exec_husuipi,
    route_trap,
    save_restore_dv,
)
from duvisor_sim.mmu.pmc import Perm, PmcRegion

from oracles import ref_destination

HANDLER = 0x7F00_0000_1000


def dv_core(platform: DvPlatform, cid: int, vmid: int, vcpuid: int, deleg: int = ALL_DELEGATABLE_MASK):
    """Program a core from HS, then leave it in HU."""
    c = platform.cores[cid]
    c.mode = PrivilegeMode.HS
    c.csr_write("h_enable", 1)
    c.csr_write("h_deleg", deleg)
    c.csr_write("h_vmid", vmid)
    c.csr_write("hu_ehb", HANDLER)
    c.csr_write("hu_vcpuid", vcpuid)
    c.mode = PrivilegeMode.HU
    return c


@pytest.fixture
def plat():
    return DvPlatform(4)


# -- register access ---------------------------------------------------------------


def test_hs_reads_and_writes_everything(plat):
    c = plat.cores[0]
    for reg in REGISTERS:
        c.csr_write(reg, 5)
        assert c.csr_read(reg) == 5


def test_hu_writes_hu_register_when_enabled(plat):
    c = dv_core(plat, 0, 3, 0)
    assert csr_access(c, "hu_vitr", "write", 0b10) == 0
    assert c.regs.hu_vitr == 0b10


@pytest.mark.parametrize("reg", ["h_enable", "h_deleg", "h_vmid"])
def test_hu_cannot_touch_h_registers(plat, reg):
    c = dv_core(plat, 0, 3, 0)
    with pytest.raises(HardwareTrap) as e:
        c.csr_read(reg)
    assert e.value.event.reason is ExitReason.ILLEGAL_HU_ACCESS
    assert c.mode is PrivilegeMode.HS


def test_hu_registers_illegal_without_dv(plat):
    c = plat.cores[0]
    c.mode = PrivilegeMode.HU
    with pytest.raises(HardwareTrap):
        c.csr_read("hu_er")


def test_guest_mode_sees_no_dv_register(plat):
    c = dv_core(plat, 0, 3, 0)
    c.mode = PrivilegeMode.V
    for reg in REGISTERS:
        c.mode = PrivilegeMode.V
        with pytest.raises(HardwareTrap):
            c.csr_read(reg)


def test_unknown_register_is_a_key_error(plat):
    with pytest.raises(KeyError):
        plat.cores[0].csr_read("hu_nonexistent")


def test_write_masks_to_64_bits(plat):
    c = plat.cores[0]
    c.csr_write("hu_vpc", (1 << 70) | 7)
    assert c.regs.hu_vpc == 7


@given(st.integers(0, (1 << 64) - 1))
def test_h_deleg_readback_never_holds_timer(mask):
    c = DvPlatform(1).cores[0]
    c.csr_write("h_deleg", mask)
    assert c.csr_read("h_deleg") == mask & ~TIMER_BIT


# -- routing -------------------------------------------------------------------------


def test_delegated_s2pf_lands_in_hu(plat):
    c = dv_core(plat, 0, 3, 0)
    c.mode, c.pc = PrivilegeMode.V, 0x8000_0040
    ev = route_trap(c, ExitReason.S2PF_LOAD, 0x1234)
    assert ev.destination is Destination.HU_HANDLER
    assert (c.mode, c.pc) == (PrivilegeMode.HU, HANDLER)
    assert (c.regs.hu_er, c.regs.hu_einfo, c.regs.hu_vpc) == (int(ExitReason.S2PF_LOAD), 0x1234, 0x8000_0040)


def test_undelegated_reason_goes_to_hs(plat):
    c = dv_core(plat, 0, 3, 0, deleg=1 << ExitReason.HYPERCALL)
    c.mode = PrivilegeMode.V
    ev = c.route_trap(ExitReason.S2PF_STORE, 0x99)
    assert ev.destination is Destination.HS_HANDLER
    assert (c.hs_cause, c.hs_tval, c.hs_prev_mode) == (ExitReason.S2PF_STORE, 0x99, PrivilegeMode.V)


def test_timer_always_reaches_hs(plat):
    c = dv_core(plat, 0, 3, 0, deleg=(1 << 64) - 1)
    c.mode = PrivilegeMode.V
    assert c.route_trap(ExitReason.TIMER).destination is Destination.HS_HANDLER


def test_trap_from_hu_is_not_delegated(plat):
    c = dv_core(plat, 0, 3, 0)
    assert c.route_trap(ExitReason.HYPERCALL).destination is Destination.HS_HANDLER


def test_missing_handler_address_blocks_delegation(plat):
    c = dv_core(plat, 0, 3, 0)
    c.regs.hu_ehb = 0
    c.mode = PrivilegeMode.V
    assert c.route_trap(ExitReason.HYPERCALL).destination is Destination.HS_HANDLER


@given(
    reason=st.sampled_from(list(ExitReason)),
    mask=st.integers(0, 511),
    mode=st.sampled_from(list(PrivilegeMode)),
    enable=st.integers(0, 1),
    ehb=st.sampled_from([0, HANDLER]),
)
def test_routing_matches_reference(reason, mask, mode, enable, ehb):
    c = DvPlatform(1).cores[0]
    c.csr_write("h_deleg", mask)
    c.regs.h_enable, c.regs.hu_ehb = enable, ehb
    c.mode = mode
    assert c.route_trap(reason).destination.value == ref_destination(int(reason), enable, mask, mode.value, ehb)


def test_hs_handler_and_observer_called(plat):
    seen, handled = [], []
    plat.trap_observer = seen.append
    plat.hs_handler = lambda core, ev: handled.append(ev.reason)
    c = dv_core(plat, 1, 3, 0)
    c.mode = PrivilegeMode.V
    c.route_trap(ExitReason.HYPERCALL)
    c.mode = PrivilegeMode.V
    c.route_trap(ExitReason.TIMER)
    assert [e.reason for e in seen] == [ExitReason.HYPERCALL, ExitReason.TIMER]
    assert handled == [ExitReason.TIMER]


# -- HURET ----------------------------------------------------------------------------


def test_huret_enters_guest_with_injection(plat):
    entries = []
    plat.entry_observer = entries.append
    c = dv_core(plat, 0, 3, 0)
    c.csr_write("hu_vpc", 0x8000_0000)
    c.csr_write("hu_vitr", 0b100)
    assert exec_huret(c) is None
    assert (c.mode, c.pc) == (PrivilegeMode.V, 0x8000_0000)
    assert c.guest_pending == 0b100 and c.regs.hu_vitr == 0
    assert entries == [c]


def test_huret_from_guest_is_illegal(plat):
    c = dv_core(plat, 0, 3, 0)
    c.mode = PrivilegeMode.V
    with pytest.raises(HardwareTrap):
        c.huret()


def test_huret_from_hu_needs_dv(plat):
    c = plat.cores[0]
    c.mode = PrivilegeMode.HU
    with pytest.raises(HardwareTrap):
        c.huret()


def test_trap_then_huret_round_trip(plat):
    c = dv_core(plat, 0, 3, 0)
    c.csr_write("hu_vpc", 0x8000_0010)
    c.huret()
    c.route_trap(ExitReason.HYPERCALL, 7)
    assert c.mode is PrivilegeMode.HU
    c.csr_write("hu_vpc", c.csr_read("hu_vpc") + 4)
    c.huret()
    assert (c.mode, c.pc) == (PrivilegeMode.V, 0x8000_0014)


def test_latched_uipi_fires_on_entry(plat):
    a = dv_core(plat, 0, 3, 0)
    b = dv_core(plat, 1, 3, 1)
    assert exec_husuipi(plat, a.id, 1) is UipiResult.PENDED
    ev = b.huret()
    assert ev is not None and ev.reason is ExitReason.UIPI and ev.info == 0
    assert b.mode is PrivilegeMode.HU and b.regs.hu_er == int(ExitReason.UIPI)


# -- HUSUIPI --------------------------------------------------------------------------------


def test_uipi_to_running_guest_is_delivered(plat):
    a = dv_core(plat, 0, 3, 0)
    b = dv_core(plat, 1, 3, 1)
    b.mode = PrivilegeMode.V
    assert plat.husuipi(a.id, 1) is UipiResult.DELIVERED
    assert b.mode is PrivilegeMode.HU and b.regs.hu_einfo == 0


def test_uipi_to_other_vm_faults_sender(plat):
    a = dv_core(plat, 0, 3, 0)
    b = dv_core(plat, 1, 4, 1)
    b.mode = PrivilegeMode.V
    with pytest.raises(HardwareTrap) as e:
        plat.husuipi(a.id, 1)
    assert e.value.event.core == a.id and a.mode is PrivilegeMode.HS
    assert b.mode is PrivilegeMode.V and not b.uipi_latch


def test_uipi_from_guest_mode_faults(plat):
    a = dv_core(plat, 0, 3, 0)
    dv_core(plat, 1, 3, 1)
    a.mode = PrivilegeMode.V
    with pytest.raises(HardwareTrap):
        plat.husuipi(a.id, 1)


def test_uipi_without_dv_faults(plat):
    plat.cores[0].mode = PrivilegeMode.HU
    dv_core(plat, 1, 3, 1)
    with pytest.raises(HardwareTrap):
        plat.husuipi(0, 1)


def test_vmid_zero_never_receives(plat):
    a = dv_core(plat, 0, 0, 0)
    dv_core(plat, 1, 0, 1)
    with pytest.raises(HardwareTrap):
        plat.husuipi(a.id, 1)


# -- save / restore -----------------------------------------------------------------------


def test_save_restore_round_trip(plat):
    c = dv_core(plat, 0, 9, 2)
    c.regs.hu_vitr = 0b1010
    c.pmc.install(3, PmcRegion(0x8000_0000, 0x10_0000, Perm.RW))
    c.uipi_latch.append(1)
    c.owner_pid = 100
    c.mode = PrivilegeMode.HS
    snap = save_restore_dv(c, "save")
    fresh = DvPlatform(1).cores[0]
    save_restore_dv(fresh, "restore", snap)
    assert fresh.regs.as_tuple() == c.regs.as_tuple()
    assert fresh.pmc.snapshot() == c.pmc.snapshot()
    assert fresh.uipi_latch == [1] and fresh.owner_pid == 100
    assert fresh.save_dv() == snap


def test_save_requires_hs(plat):
    c = dv_core(plat, 0, 9, 2)
    with pytest.raises(HardwareTrap):
        c.save_dv()


def test_restore_refuses_live_vmid_of_other_process(plat):
    a = dv_core(plat, 0, 9, 0)
    a.owner_pid = 100
    b = plat.cores[1]
    b.regs.h_vmid, b.owner_pid = 5, 200
    b.mode = PrivilegeMode.HS
    snap = b.save_dv()
    c = plat.cores[2]
    a.regs.h_vmid = 5
    with pytest.raises(ValueError):
        c.restore_dv(snap)


def test_save_restore_bad_direction(plat):
    with pytest.raises(ValueError):
        save_restore_dv(plat.cores[0], "sideways")
