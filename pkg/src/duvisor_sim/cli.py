"""Command-line entry point: ``duvisor-sim run|list-scenarios|dump-access-table``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from duvisor_sim.bench.costmodel import CostModel, CostModelError, bundled_cost_model, load_cost_model
from duvisor_sim.bench.report import RENDERERS, emit_report
from duvisor_sim.bench.scenario import ScenarioError, list_scenarios, run_scenario
from duvisor_sim.hw import access_table

ACCESS_COLUMNS = ("register", "mode", "kind", "legal_dv_on", "legal_dv_off")


def _cost_model(ref: str | None) -> CostModel:
    """A path to a cost-model file, or the name of a bundled one."""
    if ref is None:
        return bundled_cost_model()
    p = Path(ref)
    if p.exists():
        return load_cost_model(p)
    try:
        return bundled_cost_model(ref)
    except FileNotFoundError:
        raise CostModelError(f"no cost model file or bundled model named {ref!r}") from None


def _write(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def cmd_run(args: argparse.Namespace) -> int:
    model = _cost_model(args.cost_model)
    report, machine = run_scenario(args.scenario, model, seed=args.seed, reps=args.reps,
                                   interleave=args.interleave)
    text = emit_report(report, args.format, None)
    _write(text, args.out)
    if args.trace:
        machine.write_trace(args.trace)
    return 0


def cmd_list(args: argparse.Namespace) -> int:
    rows = list_scenarios()
    width = max((len(n) for n, _ in rows), default=0)
    _write("".join(f"{n:<{width}}  {t}\n" for n, t in rows), None)
    return 0


def render_access_table(fmt: str) -> str:
    rows = access_table()
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, ACCESS_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()
    out = [f"{'register':<10} {'mode':<4} {'kind':<5} {'DV on':<6} DV off"]
    for r in rows:
        out.append(f"{r['register']:<10} {r['mode']:<4} {r['kind']:<5} "
                   f"{'yes' if r['legal_dv_on'] else 'no':<6} {'yes' if r['legal_dv_off'] else 'no'}")
    return "\n".join(out) + "\n"


def cmd_access(args: argparse.Namespace) -> int:
    _write(render_access_table(args.format), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="duvisor-sim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log hypervisor diagnostics")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a microbenchmark scenario and print its cost report")
    r.add_argument("scenario", help="bundled scenario name or path to a scenario YAML file")
    r.add_argument("--cost-model", help="cost-model JSON file or bundled name (default: default_costs)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--format", choices=sorted(RENDERERS), default="text")
    r.add_argument("--out", help="report destination (default: stdout)")
    r.add_argument("--reps", type=int, help="override the scenario's repetition count")
    r.add_argument("--interleave", choices=("rr", "random"), default="rr")
    r.add_argument("--trace", help="also write the full-run trace as JSON lines")
    r.set_defaults(func=cmd_run)

    ls = sub.add_parser("list-scenarios", help="list bundled scenarios")
    ls.set_defaults(func=cmd_list)

    a = sub.add_parser("dump-access-table", help="print the DV register access-control table")
    a.add_argument("--format", choices=("json", "csv", "text"), default="text")
    a.add_argument("--out", help="destination (default: stdout)")
    a.set_defaults(func=cmd_access)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, CostModelError) as e:
        print(f"duvisor-sim: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"duvisor-sim: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
