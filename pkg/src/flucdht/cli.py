"""Command line entry point: ``run``, ``sweep`` and ``trace``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .churn import ChurnTrace, TraceFormatError
from .metrics import RunReport, reports_to_csv, rows_to_csv, sweep, sweep_to_csv, to_json
from .runner import run_at_rate, run_scenario, trace_for
from .scenario import Scenario, ScenarioError, dump_scenario, load_scenario

logger = logging.getLogger("flucdht")


def _fmt(x: Optional[float], spec: str = ".4f") -> str:
    return "n/a" if x is None else format(x, spec)


def summary_line(rep: RunReport) -> str:
    return (
        f"success={_fmt(rep.lookup_success_rate)} mean_hops={_fmt(rep.mean_hops, '.3f')} "
        f"maintenance_share={_fmt(rep.maintenance_share)} lookups={rep.issued_lookups}"
    )


def _prepare_out(out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    probe = out_dir / ".write-test"
    probe.write_text("")
    probe.unlink()
    return out_dir


def cmd_run(scenario: Scenario, out_dir: Path, trace: Optional[ChurnTrace] = None) -> int:
    out = _prepare_out(out_dir)
    rep = run_scenario(scenario, trace)
    (out / "scenario.toml").write_text(dump_scenario(scenario))
    (out / "report.json").write_text(to_json(rep))
    (out / "report.csv").write_text(reports_to_csv([rep]))
    print(summary_line(rep))
    return 0


def cmd_sweep(scenario: Scenario, rates: Sequence[float], out_dir: Path, seeds: int = 3, floor: float = 0.9) -> int:
    if not rates or list(rates) != sorted(rates) or any(r < 0 for r in rates):
        raise ValueError("rates must be a non-empty ascending list of non-negative numbers")
    out = _prepare_out(out_dir)
    seed_list = [scenario.seed + i for i in range(seeds)]
    result = sweep(scenario, rates, seed_list, floor, run=run_at_rate)
    (out / "scenario.toml").write_text(dump_scenario(scenario))
    (out / "sweep.json").write_text(to_json(result))
    (out / "sweep.csv").write_text(sweep_to_csv(result))
    (out / "runs.csv").write_text(rows_to_csv(result.runs))
    knee = "none" if result.knee is None else format(result.knee, "g")
    for p in result.points:
        print(f"rate={p.rate:g} success={_fmt(p.mean_success)} maintenance_share={_fmt(p.mean_maintenance_share)}")
    print(f"knee={knee} floor={floor:g}")
    return 0


def cmd_trace(scenario: Scenario, out_path: Path) -> int:
    trace = trace_for(scenario)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    trace.write(out_path)
    print(f"wrote {len(trace)} events to {out_path}")
    return 0


def _rates(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid rate list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flucdht", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario")
    p_run.add_argument("scenario", type=Path)
    p_run.add_argument("-o", "--out", type=Path, required=True)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--trace", type=Path, help="replay a churn trace instead of generating one")

    p_sweep = sub.add_parser("sweep", help="sweep fluctuation rates (joins+departures per peer per hour)")
    p_sweep.add_argument("scenario", type=Path)
    p_sweep.add_argument("--rates", type=_rates, required=True)
    p_sweep.add_argument("--seeds", type=int, default=3)
    p_sweep.add_argument("--floor", type=float, default=0.9)
    p_sweep.add_argument("-o", "--out", type=Path, required=True)
    p_sweep.add_argument("--seed", type=int)

    p_trace = sub.add_parser("trace", help="export the scenario's churn trace")
    p_trace.add_argument("scenario", type=Path)
    p_trace.add_argument("-o", "--out", type=Path, required=True)
    p_trace.add_argument("--seed", type=int)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        scenario = load_scenario(args.scenario)
        if args.seed is not None:
            scenario = scenario.with_seed(args.seed)
        if args.command == "run":
            trace = ChurnTrace.read(args.trace) if args.trace else None
            return cmd_run(scenario, args.out, trace)
        if args.command == "sweep":
            return cmd_sweep(scenario, args.rates, args.out, args.seeds, args.floor)
        return cmd_trace(scenario, args.out)
    except (ScenarioError, TraceFormatError, ValueError, OSError) as exc:
        print(f"flucdht: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
