"""Customize a base network to the reference motion and compare skip routings.

Uses the cached acceptance base when present (otherwise pretrains it, which
takes about 15 minutes on one CPU core), trains the spatial and TAP temporal
adapters for one seed, and samples the prompt grid with the vanilla skip and
with the appearance highway.

    python demos/02_customize_and_sample.py [cache_dir] [out_dir]
"""

import sys
from pathlib import Path

from motionlab import io
from motionlab.cli import default_config
from motionlab.experiments import EvalConfig, Lab, Variant

cache = Path(sys.argv[1] if len(sys.argv) > 1 else ".cache/acceptance")
out = Path(sys.argv[2] if len(sys.argv) > 2 else "runs/demo_customize")
out.mkdir(parents=True, exist_ok=True)

lab = Lab.build(default_config(), EvalConfig(), cache_dir=cache)
variants = [
    Variant("base"),
    Variant("TAP", plan="k"),
    Variant("TAP+AH", plan="k", skip_mode="ah", beta=1.2),
    Variant("FullTemporal", plan="full"),
]
for v in variants:
    clips, targets = lab.sample(0, v)
    report = lab.evaluate(0, v)
    for i in range(0, len(clips), lab.eval_cfg.samples_per_prompt):
        io.write_gif(clips[i], out / f"{v.name}_{i:02d}.gif")
    print(
        f"{v.name:13s} motion {report.motion_acc:.3f}  align {report.app_align:.3f}  "
        f"leak {report.app_leak:.3f}  consist {report.temporal_consist:.3f}"
    )
print(f"first sample per prompt written to {out}")
