"""Scenario files, VM description parsing and the microbenchmark runner.

Each scenario runs twice: at ``reps`` repetitions and at zero. Pricing the
difference removes boot and shutdown, so per-op figures are exact.
"""

from __future__ import annotations

import re
import time
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from string import Template

import yaml

from duvisor_sim.bench.costmodel import CostModel, PATHS, by_category, kind_counts, price_counts, route_counts
from duvisor_sim.bench.report import BenchReport
from duvisor_sim.guest import assemble
from duvisor_sim.hypervisor import DeviceConfig, DuVisor, VmConfig
from duvisor_sim.machine import Machine
from duvisor_sim.pvio import generate_schedule, load_packet_schedule

SCENARIO_FORMAT = "duvisor-scenario/1"
_SIZE_RE = re.compile(r"^\s*(\d+)\s*([KMG]i?B)?\s*$", re.I)
_UNITS = {None: 1, "KB": 1 << 10, "KIB": 1 << 10, "MB": 1 << 20, "MIB": 1 << 20, "GB": 1 << 30, "GIB": 1 << 30}


class ScenarioError(ValueError):
    pass


def parse_size(v) -> int:
    if isinstance(v, int):
        return v
    m = _SIZE_RE.match(str(v))
    if not m:
        raise ScenarioError(f"bad size {v!r}")
    return int(m.group(1)) * _UNITS[m.group(2).upper() if m.group(2) else None]


def _data_dir(sub: str) -> Path:
    return Path(str(resources.files("duvisor_sim.data").joinpath(sub)))


def list_scenarios() -> list[tuple[str, str]]:
    out = []
    for p in sorted(_data_dir("scenarios").glob("*.yaml")):
        doc = yaml.safe_load(p.read_text())
        out.append((doc["name"], doc.get("title", "")))
    return out


def find_scenario(name_or_path: str) -> Path:
    p = Path(name_or_path)
    if p.suffix in (".yaml", ".yml") and p.exists():
        return p
    cand = _data_dir("scenarios") / f"{name_or_path}.yaml"
    if cand.exists():
        return cand
    raise ScenarioError(f"no scenario {name_or_path!r}; try list-scenarios")


@dataclass
class Scenario:
    name: str
    title: str
    reps: int
    path: Path
    text: str
    panels: dict

    def document(self, reps: int) -> dict:
        half = reps // 2
        doc = yaml.safe_load(Template(self.text).safe_substitute(reps=reps, half=half))
        return doc


def load_scenario(name_or_path: str) -> Scenario:
    path = find_scenario(name_or_path)
    text = path.read_text()
    doc = yaml.safe_load(Template(text).safe_substitute(reps=0, half=0))
    if doc.get("format") != SCENARIO_FORMAT:
        raise ScenarioError(f"{path}: expected format {SCENARIO_FORMAT!r}")
    return Scenario(doc["name"], doc.get("title", ""), int(doc.get("reps", 1)), path, text, doc.get("panels") or {})


def _resolve(ref: str, base: Path, sub: str) -> Path:
    for cand in (base / ref, _data_dir(sub) / ref, Path(ref)):
        if cand.exists():
            return cand
    raise ScenarioError(f"cannot find {ref!r}")


def vm_config_from_spec(vm: dict, base: Path, params: dict, seed: int) -> VmConfig:
    """Build a VmConfig from a VM description mapping (``vm:`` section of a scenario)."""
    ncpu = int(vm.get("vcpus", 1))
    guests = vm.get("guests") or [vm["guest"]]
    programs = [assemble(_resolve(g, base, "guests").read_text(), params) for g in guests]
    devices = []
    for i, d in enumerate(vm.get("devices", [])):
        dc = DeviceConfig(d["kind"], d.get("name", f"{d['kind']}{i}"), int(d.get("irq", 0)),
                          int(d.get("vcpu", 0)), int(d.get("ring", 256)),
                          image_path=d.get("image"), backlog=int(d.get("backlog", 64)))
        pk = d.get("packets")
        if isinstance(pk, str):
            dc.packets = load_packet_schedule(_resolve(pk, base, "packets"))
        elif isinstance(pk, dict):
            dc.packets = generate_schedule(
                int(pk.get("count", params.get("reps", 0))), seed=seed + i,
                spacing=int(pk.get("spacing", 16)), min_len=int(pk.get("min_len", 64)),
                max_len=int(pk.get("max_len", 1514)), jitter=bool(pk.get("jitter", False)),
            )
        devices.append(dc)
    pin = vm.get("pinning", {})
    return VmConfig(
        ncpu,
        parse_size(vm.get("memory", "64MiB")),
        programs,
        devices,
        dict(vm.get("mmio", {})),
        pin.get("vcpus"),
        pin.get("io"),
        parse_size(vm["grant"]) if "grant" in vm else None,
    )


def boot_vm(machine: Machine, cfg: VmConfig, name: str = "vm") -> DuVisor:
    vm = DuVisor(machine, cfg, name)
    vm.enable()
    vm.request_memory()
    vm.vm_boot()
    return vm


@dataclass
class RunResult:
    machine: Machine
    vm: DuVisor
    boot_index: int

    @property
    def post_boot(self):
        return self.machine.trace[self.boot_index:]


def simulate(scn: Scenario, reps: int, seed: int, interleave: str = "rr",
             timer_period: int | None = None) -> RunResult:
    doc = scn.document(reps)
    vmspec = doc["vm"]
    ncores = int(doc.get("cores", 0)) or max(4, int(vmspec.get("vcpus", 1)) + len(vmspec.get("devices", [])))
    m = Machine(ncores, seed=seed, interleave=interleave, timer_period=timer_period)
    cfg = vm_config_from_spec(vmspec, scn.path.parent, {"reps": reps, "half": reps // 2}, seed)
    vm = boot_vm(m, cfg, scn.name)
    boot = len(m.trace) - 1
    reason = m.run()
    if reason != "halted" or any(v.aborted for v in vm.vcpus):
        raise ScenarioError(f"{scn.name}: run ended {reason!r} (vcpus: {[v.aborted for v in vm.vcpus]})")
    return RunResult(m, vm, boot)


def hs_events_after_boot(run: RunResult) -> int:
    return sum(1 for e in run.post_boot if e.mode == "HS")


def run_scenario(name_or_path: str, model: CostModel, seed: int = 0, reps: int | None = None,
                 interleave: str = "rr") -> tuple[BenchReport, Machine]:
    scn = load_scenario(name_or_path)
    reps = scn.reps if reps is None else reps
    if reps <= 0:
        raise ScenarioError("reps must be positive")
    t0 = time.perf_counter()
    full = simulate(scn, reps, seed, interleave)
    base = simulate(scn, 0, seed, interleave)
    elapsed = time.perf_counter() - t0

    per_op: dict[str, dict[str, float]] = {}
    counts_per_op: dict[str, dict[str, float]] = {}
    cats: dict[str, dict[str, float]] = {}
    full_kinds, base_kinds = kind_counts(full.machine.trace), kind_counts(base.machine.trace)
    for path in PATHS:
        diff = route_counts(full_kinds, path, model.routes)
        diff.subtract(route_counts(base_kinds, path, model.routes))
        diff = Counter({k: v for k, v in diff.items() if v})
        if any(v < 0 for v in diff.values()):
            raise ScenarioError(f"{scn.name}: baseline run has more {path} events than the full run")
        priced = price_counts(diff, model)
        per_op[path] = {k: v / reps for k, v in priced.items()}
        counts_per_op[path] = {k: v / reps for k, v in sorted(diff.items())}
        cats[path] = {k: v / reps for k, v in by_category(priced, model).items()}

    exits = Counter(e.info["reason"] for e in full.post_boot if e.kind == "exit")
    panels = {}
    for pname, spec in scn.panels.items():
        panels[pname] = {p: sum(per_op[p].get(s, 0.0) for s in spec.get(p, [])) for p in PATHS}
    report = BenchReport(
        scenario=scn.name,
        title=scn.title,
        reps=reps,
        seed=seed,
        cost_model=model.to_dict(),
        segments=per_op,
        segment_counts=counts_per_op,
        categories=cats,
        panels=panels,
        exit_counts=dict(sorted(exits.items())),
        hs_events_after_boot=hs_events_after_boot(full),
        sim_steps=full.machine.now,
        wall_seconds=round(elapsed, 3),
    )
    return report, full.machine
