"""Run the power, recorder and latency experiments with default constants.

Writes one CSV per experiment into the output directory and prints a short
summary table.
"""
from __future__ import annotations

import argparse
from pathlib import Path

from fogsound import sim
from fogsound.cli import summarize


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir", nargs="?", default="results")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = sim.SimConfig(seed=args.seed)
    for kind in ("power", "recorder", "latency"):
        rows = sim.experiment_rows(kind, base)
        (out / f"{kind}.csv").write_text(sim.csv_text(rows))
        for e, c, n, k, lat, mw, mj, dur in summarize(rows):
            print(f"{e:9s} {c:16s} n={n:<3d} x{k:<3d} latency {lat:8.2f} ms  "
                  f"power {mw:8.2f} mW  round {dur:6.2f} s")


if __name__ == "__main__":
    main()
