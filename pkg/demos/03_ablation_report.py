"""Run every ablation suite over the evaluation seeds and write tables and plots.

    python demos/03_ablation_report.py [cache_dir] [out_dir]
"""

import sys
from pathlib import Path

from motionlab.cli import default_config
from motionlab.experiments import SUITES, EvalConfig, Lab, ranked_table, run_suite, trace_study, write_suite

cache = Path(sys.argv[1] if len(sys.argv) > 1 else ".cache/acceptance")
out = Path(sys.argv[2] if len(sys.argv) > 2 else "runs/demo_ablation")

lab = Lab.build(default_config(), EvalConfig(), cache_dir=cache)
for name in SUITES:
    rows = run_suite(name, lab)
    write_suite(name, rows, out)
    print(f"\n{name}")
    for e in ranked_table(rows):
        print(f"  {e['rank']}. {e['variant']:20s} motion {e['motion_acc']:.3f} align {e['app_align']:.3f} leak {e['app_leak']:.3f}")

for seed in lab.eval_cfg.seeds:
    s = trace_study(lab, seed)
    print(f"seed {seed}: cos(AH, base) {s.sim_ah:.4f}  cos(TAP, base) {s.sim_tap:.4f}  AH as TAP {s.ah_as_tap:.2f}")
    for name, prof in s.profiles.items():
        prof.to_csv(out / f"similarity_{name}_seed{seed}.csv")
print(f"\ntables and plots in {out}")
