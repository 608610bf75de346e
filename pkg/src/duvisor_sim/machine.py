"""Deterministic simulator kernel.

One core advances per step. The interleaver picks among cores whose
current entity is runnable, either round-robin or from a seeded RNG. When
nothing is runnable but an I/O source has a future arrival, time skips
forward to it. Every observable event lands in :attr:`Machine.trace`.
"""

from __future__ import annotations

import gc
import json
import logging
import random
from typing import NamedTuple

from duvisor_sim.cpdriver import CpDriver
from duvisor_sim.hw import Destination, DvPlatform, ExitReason, PrivilegeMode, TrapEvent
from duvisor_sim.hypervisor import HypervisorPanic, Phase
from duvisor_sim.mmu.memory import PhysMem

log = logging.getLogger(__name__)

GiB = 1 << 30
HOST_RAM_BASE = 0x8000_0000
DEFAULT_TIMER = 10_000


class TraceEvent(NamedTuple):
    step: int
    kind: str
    core: int
    mode: str
    vmid: int
    vcpuid: int
    info: dict

    def as_dict(self) -> dict:
        return {"step": self.step, "kind": self.kind, "core": self.core, "mode": self.mode,
                "vmid": self.vmid, "vcpuid": self.vcpuid, **self.info}


_new_event = tuple.__new__


class Machine:
    def __init__(self, n_cores: int = 4, host_ram: int = 4 * GiB, seed: int = 0,
                 interleave: str = "rr", timer_period: int | None = None):
        if interleave not in ("rr", "random"):
            raise ValueError(f"unknown interleaver {interleave!r}")
        self.platform = DvPlatform(n_cores)
        self.mem = PhysMem()
        self.now = 0
        self.cp = CpDriver(self.platform, self.mem, HOST_RAM_BASE, host_ram, clock=lambda: self.now)
        self.interleave = interleave
        self.rng = random.Random(seed)
        self.timer_period = timer_period
        self.ticks = [0] * n_cores
        self.trace: list[TraceEvent] = []
        self.vms: list = []
        self.stop_reason: str | None = None
        self._rr = n_cores - 1
        self._cores = self.platform.cores
        self._slots = [(c, self.cp.runq[c.id]) for c in self.platform.cores]
        self.platform.trap_observer = self._on_trap
        self.platform.entry_observer = self._on_entry
        self.cp.audit_listeners.append(self._on_audit)
        self.cp.kill_listeners.append(self._on_kill)

    # -- tracing ----------------------------------------------------------------

    def emit(self, kind: str, core_id: int, mode: str | None = None, **info) -> None:
        core = self._cores[core_id]
        regs = core.regs
        # hottest call site: tuple.__new__ skips the generated __new__, and
        # _value_ skips the enum descriptor
        self.trace.append(
            _new_event(TraceEvent, (self.now, kind, core_id, mode or core.mode._value_,
                                    regs.h_vmid, regs.hu_vcpuid, info))
        )

    def _on_trap(self, ev: TrapEvent) -> None:
        kind = "exit" if ev.destination is Destination.HU_HANDLER else "hs_trap"
        mode = "HU" if kind == "exit" else "HS"
        self.emit(kind, ev.core, mode, reason=ev.reason._name_, info=ev.info,
                  source=ev.from_mode._value_)

    def _on_entry(self, core) -> None:
        self.emit("entry", core.id, "V")

    def _on_audit(self, rec) -> None:
        core = rec.core if rec.core is not None else 0
        self.emit("cp_" + rec.kind, core, "HS", pid=rec.pid, **rec.detail)

    def _on_kill(self, proc) -> None:
        for vm in self.vms:
            if vm.pid == proc.pid:
                vm.halted = True
                for vt in vm.vthreads:
                    vt.phase = Phase.DONE

    def register_vm(self, vm) -> None:
        self.vms.append(vm)

    def trace_lines(self) -> list[str]:
        return [json.dumps(e.as_dict(), sort_keys=True, separators=(",", ":")) for e in self.trace]

    def write_trace(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.trace_lines():
                fh.write(line + "\n")

    def exit_log(self) -> list[dict]:
        """One record per VM exit: cycle, core, vcpuid, reason, info, handler,
        and the number of steps until the matching guest entry."""
        out, open_ = [], {}
        for e in self.trace:
            if e.kind == "exit":
                rec = {"cycle": e.step, "core": e.core, "vcpuid": e.vcpuid,
                       "reason": e.info["reason"], "info": e.info["info"], "handler": None,
                       "duration": None}
                open_[e.core] = rec
                out.append(rec)
            elif e.kind == "dispatch" and e.core in open_:
                open_[e.core]["handler"] = e.info["reason"]
            elif e.kind == "entry" and e.core in open_:
                rec = open_.pop(e.core)
                rec["duration"] = e.step - rec["cycle"]
        return out

    # -- scheduling -------------------------------------------------------------------

    def _live_work(self) -> bool:
        for vm in self.vms:
            if not vm.halted:
                for vt in vm.vthreads:
                    if vt.phase is not Phase.DONE:
                        return True
        return any(
            not ent.daemon and getattr(ent, "phase", None) is not Phase.DONE
            for q in self.cp.runq.values() for ent in q
        )

    def _next_event(self) -> int | None:
        times = [t for q in self.cp.runq.values() for ent in q
                 if ent.daemon and (t := ent.next_event()) is not None]
        return min(times) if times else None

    def _pick(self) -> int | None:
        """Choose the next core, or None if no core can run."""
        now, hs, slots = self.now, PrivilegeMode.HS, self._slots
        if self.interleave == "random":
            cands = [c.id for c, q in slots if q and c.mode is not hs and q[0].runnable(now)]
            return self.rng.choice(cands) if cands else None
        # round-robin: first runnable core after the one picked last
        n = len(slots)
        i = self._rr
        for _ in range(n):
            i = i + 1 if i + 1 < n else 0
            c, q = slots[i]
            if q and c.mode is not hs and q[0].runnable(now):
                self._rr = i
                return i
        return None

    def step(self) -> bool:
        """Advance one core by one step. Returns False when the run is over."""
        cid = self._pick()
        if cid is None:
            return self._idle()
        self.now += 1
        if self.timer_period:
            self.ticks[cid] += 1
            if self.ticks[cid] % self.timer_period == 0:
                self.platform.cores[cid].route_trap(ExitReason.TIMER)
                return True
        try:
            self._slots[cid][1][0].step(self)
        except HypervisorPanic as e:
            log.info("hypervisor panic: %s", e)
        return True

    def _idle(self) -> bool:
        """Nothing runnable: skip to the next arrival. False ends the run."""
        if not self._live_work():
            self.stop_reason = "halted"
            return False
        t = self._next_event()
        if t is None or t <= self.now:
            self.stop_reason = "stalled"
            return False
        self.now = t
        return True

    def run(self, max_steps: int | None = None) -> str:
        # the trace holds only acyclic records; cyclic GC would just rescan it
        was_enabled = gc.isenabled()
        gc.disable()
        try:
            if self.interleave == "rr" and not self.timer_period:
                self._run_rr(max_steps)
            else:
                n = 0
                step = self.step
                while step():
                    n += 1
                    if max_steps is not None and n >= max_steps:
                        self.stop_reason = "step-limit"
                        break
        finally:
            if was_enabled:
                gc.enable()
        return self.stop_reason

    def _run_rr(self, max_steps: int | None) -> None:
        """Same schedule as repeated :meth:`step` calls, without per-step calls."""
        slots, hs = self._slots, PrivilegeMode.HS
        n = len(slots)
        limit = -1 if max_steps is None else max_steps
        done = 0
        while done != limit:
            now = self.now
            i = self._rr
            for _ in range(n):
                i = i + 1 if i + 1 < n else 0
                c, q = slots[i]
                if q and c.mode is not hs and q[0].runnable(now):
                    break
            else:
                if not self._idle():
                    return
                done += 1
                continue
            self._rr = i
            self.now = now + 1
            try:
                q[0].step(self)
            except HypervisorPanic as e:
                log.info("hypervisor panic: %s", e)
            done += 1
        self.stop_reason = "step-limit"
