"""Sweep fluctuation rates with adaptive backups and with a single link per entry.

Writes sweep CSVs for both configurations and prints the per-rate means.
"""

import argparse
from dataclasses import replace
from pathlib import Path

from flucdht.metrics import rows_to_csv, sweep, sweep_to_csv
from flucdht.protocol import BackupSettings
from flucdht.runner import run_at_rate
from flucdht.scenario import Scenario, load_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", type=Path)
    ap.add_argument("--rates", default="0,64,128,256,384,512,768")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--floor", type=float, default=0.9)
    ap.add_argument("-o", "--out", type=Path, default=Path("sweep-out"))
    args = ap.parse_args()

    base = load_scenario(args.scenario) if args.scenario else Scenario()
    rates = [float(r) for r in args.rates.split(",")]
    seeds = list(range(args.seeds))
    args.out.mkdir(parents=True, exist_ok=True)
    configs = {
        "adaptive": base,
        "b1": replace(base, backup=BackupSettings(adaptive=False, b_fixed=1)),
    }
    for name, scen in configs.items():
        res = sweep(scen, rates, seeds, args.floor, run=run_at_rate)
        (args.out / f"{name}_sweep.csv").write_text(sweep_to_csv(res))
        (args.out / f"{name}_runs.csv").write_text(rows_to_csv(res.runs))
        print(f"[{name}] knee={res.knee} trend p_decreasing={res.trend['p_decreasing']:.4f}")
        for p in res.points:
            flag = " (extinct runs excluded)" if p.flagged else ""
            print(f"  rate={p.rate:6g}  success={p.mean_success}  share={p.mean_maintenance_share}{flag}")


if __name__ == "__main__":
    main()
