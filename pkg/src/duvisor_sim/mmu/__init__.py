"""Two-stage MMU and physical memory checking."""

from duvisor_sim.mmu._accel import BACKEND
from duvisor_sim.mmu.memory import PAGE_SIZE, PhysMem
from duvisor_sim.mmu.pagetable import (
    PageTableError,
    StageOnePageTable,
    StageTwoPageTable,
    dump_entries,
    s2_map,
)
from duvisor_sim.mmu.pmc import (
    PMC_SLOTS,
    Access,
    PmcBank,
    PmcConfigError,
    PmcRegion,
    Perm,
    pmc_check,
    pmc_program,
)
from duvisor_sim.mmu.translate import (
    Fault,
    FaultKind,
    s1_map,
    s1_walk,
    translate,
    translate_gpa,
)

__all__ = [
    "BACKEND", "PAGE_SIZE", "PMC_SLOTS", "Access", "Fault", "FaultKind", "PageTableError",
    "Perm", "PhysMem", "PmcBank", "PmcConfigError", "PmcRegion", "StageOnePageTable",
    "StageTwoPageTable", "dump_entries", "pmc_check", "pmc_program", "s1_map", "s1_walk",
    "s2_map", "translate", "translate_gpa",
]
