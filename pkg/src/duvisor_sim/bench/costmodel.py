"""Calibrated cost model and linear trace pricing.

A trace is priced under one of two routings. ``duvisor`` charges each
event for the delegated path it actually took. ``kvm`` re-routes the same
events through a kernel-mediated path (exits to HS, MMIO forwarded to a
user-space helper and back, notifications through an eventfd). Every event
kind must be either routed or explicitly unpriced.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

COST_FORMAT = "duvisor-costs/1"
PATHS = ("duvisor", "kvm")
CATEGORIES = ("hw", "kernel", "user", "guest")

ROUTES: dict[str, dict[str, tuple[str, ...]]] = {
    "duvisor": {
        "exit": ("v_to_hu_exit",),
        "entry": ("hu_to_v_entry",),
        "hypercall": ("hypercall_handle_duv",),
        "alloc": ("duv_alloc",),
        "s2_map": ("s2pt_map",),
        "mmio": ("mmio_emul",),
        "vipi_insert": ("vipi_insert_uipi",),
        "io_notify": ("irqchip_emul", "uipi_notify"),
        "guest_irq": ("virq_handle_duv",),
    },
    "kvm": {
        "exit": ("v_to_hs_exit",),
        "entry": ("hs_to_v_entry",),
        "hypercall": ("hypercall_handle_kvm",),
        "alloc": ("kvm_alloc", "kvm_s2pf_other"),
        "s2_map": ("s2pt_map",),
        # forwarded to the user-space device model and back
        "mmio": ("kvm_mmio_dispatch", "hs_hu_transfer", "mmio_emul", "hs_hu_transfer"),
        "vipi_insert": ("vipi_insert_kvm",),
        "io_notify": ("uk_switch", "irqchip_emul", "eventfd_notify"),
        "guest_irq": ("virq_handle_kvm",),
    },
}

UNPRICED = frozenset(
    {
        "boot_done",
        "dispatch",
        "inject",
        "wfi_block",
        "wake",
        "husuipi",
        "halt",
        "vm_halt",
        "guest_abort",
        "guest_ipi_ack",
        "backend_dma",
        "hs_trap",
    }
)
UNPRICED_PREFIXES = ("cp_",)


class CostModelError(ValueError):
    pass


@dataclass
class Segment:
    cycles: float
    category: str = "user"
    source: str = ""


@dataclass
class CostModel:
    name: str
    segments: dict[str, Segment]
    description: str = ""
    routes: dict[str, dict[str, tuple[str, ...]]] = field(default_factory=lambda: ROUTES)

    def __post_init__(self) -> None:
        for k, s in self.segments.items():
            if s.cycles < 0:
                raise CostModelError(f"segment {k} has negative cost")
            if s.category not in CATEGORIES:
                raise CostModelError(f"segment {k}: unknown category {s.category!r}")

    def cost(self, seg: str) -> float:
        try:
            return self.segments[seg].cycles
        except KeyError:
            raise CostModelError(f"cost model {self.name!r} has no segment {seg!r}") from None

    def scaled(self, k: float) -> "CostModel":
        return CostModel(
            self.name,
            {n: Segment(s.cycles * k, s.category, s.source) for n, s in self.segments.items()},
            self.description,
            self.routes,
        )

    def to_dict(self) -> dict:
        doc = {
            "format": COST_FORMAT,
            "name": self.name,
            "description": self.description,
            "segments": {
                n: {"cycles": s.cycles, "category": s.category, "source": s.source}
                for n, s in self.segments.items()
            },
        }
        if self.routes is not ROUTES:
            doc["routes"] = {p: {k: list(v) for k, v in r.items()} for p, r in self.routes.items()}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "CostModel":
        if doc.get("format") != COST_FORMAT:
            raise CostModelError(f"expected format {COST_FORMAT!r}, got {doc.get('format')!r}")
        segs = {}
        for n, v in doc["segments"].items():
            if isinstance(v, (int, float)):
                segs[n] = Segment(v)
            else:
                segs[n] = Segment(v["cycles"], v.get("category", "user"), v.get("source", ""))
        routes = ROUTES
        if "routes" in doc:
            routes = {p: {k: tuple(v) for k, v in r.items()} for p, r in doc["routes"].items()}
        return cls(doc.get("name", "unnamed"), segs, doc.get("description", ""), routes)


def load_cost_model(path: str | Path) -> CostModel:
    return CostModel.from_dict(json.loads(Path(path).read_text()))


def bundled_cost_model(name: str = "default_costs") -> CostModel:
    ref = resources.files("duvisor_sim.data").joinpath(f"{name}.json")
    return CostModel.from_dict(json.loads(ref.read_text()))


def kind_counts(trace) -> Counter:
    """Occurrences of each event kind in ``trace`` (TraceEvents or dicts)."""
    return Counter(ev.kind if hasattr(ev, "kind") else ev["kind"] for ev in trace)


def route_counts(kinds: Counter, path: str, routes=ROUTES) -> Counter:
    """Segment occurrences for a kind histogram under ``path``."""
    table = routes[path]
    counts: Counter = Counter()
    for kind, n in kinds.items():
        segs = table.get(kind)
        if segs is not None:
            for seg in segs:
                counts[seg] += n
        elif kind not in UNPRICED and not kind.startswith(UNPRICED_PREFIXES):
            raise CostModelError(f"trace event kind {kind!r} has no pricing route for {path}")
    return counts


def segment_counts(trace, path: str, routes=ROUTES) -> Counter:
    """Count segment occurrences for ``trace`` (TraceEvents or dicts) under ``path``."""
    return route_counts(kind_counts(trace), path, routes)


def price_counts(counts: Counter, model: CostModel) -> dict[str, float]:
    return {seg: n * model.cost(seg) for seg, n in sorted(counts.items())}


def price_trace(trace, model: CostModel, path: str = "duvisor") -> dict[str, float]:
    """Per-segment cycle totals; the grand total is ``sum(result.values())``."""
    return price_counts(segment_counts(trace, path, model.routes), model)


def by_category(priced: dict[str, float], model: CostModel) -> dict[str, float]:
    out = {c: 0.0 for c in CATEGORIES}
    for seg, cyc in priced.items():
        out[model.segments[seg].category] += cyc
    return out
