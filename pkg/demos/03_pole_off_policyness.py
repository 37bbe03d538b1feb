"""P3O versus PPO on pole balancing: returns, DEON and the CPI objective.

Run:  python demos/03_pole_off_policyness.py [steps] [out_dir]

Trains both methods on a few seeds, writes one CSV per run plus a summary,
and draws SVG curves for the evaluation return, DEON and the CPI value.
The default budget is small; 300000 steps gives near-perfect balancing.
"""

import sys
from pathlib import Path

from p3olab.experiment import Cell, ExperimentSpec, emit_plot, read_metrics_csv, read_summary, run_experiment

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 61_440
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_runs")
seeds = [0, 1]

cells = [Cell(v, "pole", seeds, {"total_steps": steps}) for v in ("p3o", "ppo")]
result = run_experiment(ExperimentSpec(cells, out_dir=str(out)), log=print)

for row in read_summary(result.summary_path):
    print(f"{row['variant']:>4}: final greedy return {row['mean']:.1f} +/- {row['std']:.1f}")

# DEON is max |r - 1| over the final epoch; P3O keeps a gradient outside the
# clip band, so it tends to drift further from the behaviour policy than PPO
for v in ("p3o", "ppo"):
    rows = [read_metrics_csv(out / f"{v}_pole_s{s}.csv") for s in seeds]
    half = [r[len(r) // 2:] for r in rows]
    deon = sum(x.deon for h in half for x in h) / sum(len(h) for h in half)
    cpi = sum(x.cpi_value for r in rows for x in r) / sum(len(r) for r in rows)
    print(f"{v:>4}: final-half DEON {deon:.4f}, mean CPI value {cpi:.5f}")

csvs = sorted(out.glob("*_pole_s*.csv"))
for metric in ("eval_return", "deon", "cpi_value"):
    print("wrote", emit_plot(csvs, metric, out / f"{metric}.svg", title=f"pole: {metric}"))
