"""Benchmark reports: json (round-trippable), csv (long form, stable columns)
and a text rendering with one stacked breakdown per path."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

REPORT_FORMAT = "duvisor-report/1"
CSV_COLUMNS = ("scenario", "section", "name", "duv_total", "kvm_total", "saved", "improvement_pct")


def improvement(kvm: float, duv: float) -> float:
    """Relative saving of the delegated path, in percent."""
    return 100.0 * (kvm - duv) / kvm if kvm else 0.0


@dataclass
class BenchReport:
    scenario: str
    reps: int
    seed: int
    cost_model: dict
    # path -> segment -> cycles per op
    segments: dict[str, dict[str, float]]
    title: str = ""
    segment_counts: dict[str, dict[str, float]] = field(default_factory=dict)
    categories: dict[str, dict[str, float]] = field(default_factory=dict)
    panels: dict[str, dict[str, float]] = field(default_factory=dict)
    exit_counts: dict[str, int] = field(default_factory=dict)
    hs_events_after_boot: int = 0
    sim_steps: int = 0
    # not serialised: it would break byte-identical reruns
    wall_seconds: float = 0.0

    def total(self, path: str) -> float:
        return sum(self.segments.get(path, {}).values())

    @property
    def duv_total(self) -> float:
        return self.total("duvisor")

    @property
    def kvm_total(self) -> float:
        return self.total("kvm")

    @property
    def saved(self) -> float:
        return self.kvm_total - self.duv_total

    @property
    def improvement_pct(self) -> float:
        return improvement(self.kvm_total, self.duv_total)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "scenario": self.scenario,
            "title": self.title,
            "reps": self.reps,
            "seed": self.seed,
            "totals": {"duvisor": self.duv_total, "kvm": self.kvm_total},
            "saved": self.saved,
            "improvement_pct": self.improvement_pct,
            "segments": self.segments,
            "segment_counts": self.segment_counts,
            "categories": self.categories,
            "panels": self.panels,
            "exit_counts": self.exit_counts,
            "hs_events_after_boot": self.hs_events_after_boot,
            "sim_steps": self.sim_steps,
            "cost_model": self.cost_model,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchReport":
        if doc.get("format") != REPORT_FORMAT:
            raise ValueError(f"expected format {REPORT_FORMAT!r}")
        return cls(
            scenario=doc["scenario"],
            title=doc.get("title", ""),
            reps=doc["reps"],
            seed=doc["seed"],
            cost_model=doc["cost_model"],
            segments=doc["segments"],
            segment_counts=doc.get("segment_counts", {}),
            categories=doc.get("categories", {}),
            panels=doc.get("panels", {}),
            exit_counts=doc.get("exit_counts", {}),
            hs_events_after_boot=doc.get("hs_events_after_boot", 0),
            sim_steps=doc.get("sim_steps", 0),
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, BenchReport) and self.to_dict() == other.to_dict()


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def render_json(r: BenchReport) -> str:
    return json.dumps(r.to_dict(), indent=2, sort_keys=True) + "\n"


def render_csv(r: BenchReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)

    def row(section: str, name: str, duv: float, kvm: float) -> None:
        w.writerow((r.scenario, section, name, _fmt(duv), _fmt(kvm), _fmt(kvm - duv), _fmt(improvement(kvm, duv))))

    row("total", "total", r.duv_total, r.kvm_total)
    for name in sorted(r.panels):
        row("panel", name, r.panels[name].get("duvisor", 0.0), r.panels[name].get("kvm", 0.0))
    segs = sorted(set(r.segments.get("duvisor", {})) | set(r.segments.get("kvm", {})))
    for s in segs:
        row("segment", s, r.segments.get("duvisor", {}).get(s, 0.0), r.segments.get("kvm", {}).get(s, 0.0))
    for c in sorted(set(r.categories.get("duvisor", {})) | set(r.categories.get("kvm", {}))):
        row("category", c, r.categories.get("duvisor", {}).get(c, 0.0), r.categories.get("kvm", {}).get(c, 0.0))
    return buf.getvalue()


BAR = 40


def render_text(r: BenchReport) -> str:
    out = [f"{r.scenario}: {r.title}".rstrip(": "),
           f"reps={r.reps} seed={r.seed} cost-model={r.cost_model.get('name', '?')}", ""]
    for path, label in (("kvm", "KVM path"), ("duvisor", "DuVisor path")):
        total = r.total(path)
        out.append(f"{label}: {total:,.0f} cycles/op")
        for seg, cyc in sorted(r.segments.get(path, {}).items(), key=lambda kv: -kv[1]):
            share = cyc / total if total else 0.0
            out.append(f"  {seg:<22} {cyc:>10,.0f}  {100 * share:6.2f}%  {'#' * round(BAR * share)}")
        out.append("")
    if r.panels:
        out.append("Panels (cycles/op)       KVM    DuVisor    saved      improvement")
        for name in sorted(r.panels):
            k, d = r.panels[name].get("kvm", 0.0), r.panels[name].get("duvisor", 0.0)
            out.append(f"  {name:<18} {k:>9,.0f} {d:>9,.0f} {k - d:>9,.0f}   {improvement(k, d):6.2f}%")
        out.append("")
    out.append(f"Total: KVM {r.kvm_total:,.0f}  DuVisor {r.duv_total:,.0f}  saved {r.saved:,.0f} "
               f"({r.improvement_pct:.2f}%)")
    exits = ", ".join(f"{k}={v}" for k, v in r.exit_counts.items())
    out.append(f"Exits: {exits or 'none'}; HS events after boot: {r.hs_events_after_boot}")
    return "\n".join(out) + "\n"


RENDERERS = {"json": render_json, "csv": render_csv, "text": render_text}


def emit_report(r: BenchReport, fmt: str, out: str | Path | None = None) -> str:
    if fmt not in RENDERERS:
        raise ValueError(f"unknown format {fmt!r}")
    text = RENDERERS[fmt](r)
    if out is not None and str(out) != "-":
        Path(out).write_text(text)
    return text


def load_report(path: str | Path) -> BenchReport:
    return BenchReport.from_dict(json.loads(Path(path).read_text()))
