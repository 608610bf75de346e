"""Small helpers for booting VMs from inline guest source in tests."""

from __future__ import annotations

from duvisor_sim.bench.scenario import boot_vm
from duvisor_sim.guest import assemble
from duvisor_sim.hypervisor import DeviceConfig, VmConfig
from duvisor_sim.machine import Machine

MiB = 1 << 20


def boot_guest(sources, *, machine: Machine | None = None, cores: int = 4, memory: int = 8 * MiB,
               devices=(), vcpu_cores=None, io_cores=None, name: str = "vm", seed: int = 0,
               params: dict | None = None, **cfg_kw):
    """Boot one VM running ``sources`` (one string, or one per vCPU)."""
    if isinstance(sources, str):
        sources = [sources]
    m = machine or Machine(cores, seed=seed)
    progs = [assemble(s, params) for s in sources]
    cfg = VmConfig(len(progs), memory, progs, devices=list(devices), vcpu_cores=vcpu_cores,
                   io_cores=io_cores, **cfg_kw)
    return m, boot_vm(m, cfg, name)


def spy_guest_accesses(vm, sink: list) -> None:
    """Record every PMC-approved guest-derived access as ``(pid, hpa, length)``."""
    for vcpu in vm.vcpus:
        cpu = vcpu.cpu
        orig = cpu.step

        def step(core, s2, mem, now=0, audit=None, _orig=orig):
            acc: list = []
            try:
                return _orig(core, s2, mem, now, acc)
            finally:
                sink.extend((vm.pid, h, n) for h, n in acc)

        cpu.step = step


def net_device(name: str = "net0", packets=(), **kw) -> DeviceConfig:
    return DeviceConfig("net", name, packets=list(packets), **kw)


def console(name: str = "console0") -> DeviceConfig:
    return DeviceConfig("console", name)
