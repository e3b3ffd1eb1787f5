"""Command-line experiment runner: ``python -m motionlab <command> ...``.

Configs are INI files with one section per module and a ``schema`` field in
``[meta]``. Every command is deterministic given its config and ``--seed``.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import csv
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import io
from .diffusion import sample_pli
from .errors import ConfigError, DependencyError
from .experiments import SUITES, EvalConfig, Lab, run_suite, seeded, trace_study, write_suite
from .net import UNetConfig
from .probe import metric_suite, summary_text, write_reports_csv
from .trainer import DataConfig, RunConfig, TrainConfig, make_data, pretrain_base, run_customization

SCHEMA = 1
PLANS = ("tap", "full", "q", "k", "v", "ff", "qk")
log = logging.getLogger("motionlab")


# ---------------------------------------------------------------------------
# config files


def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _format_value(v) -> str:
    return repr(v) if not isinstance(v, str) else v


def load_config(path) -> tuple[RunConfig, EvalConfig]:
    """Read an INI config; missing sections and keys keep their defaults."""
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"config file {path} does not exist")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys such as T are case sensitive
    cp.read(path)
    schema = cp.get("meta", "schema", fallback=None)
    if schema is None or int(schema) != SCHEMA:
        raise ConfigError(f"{path}: expected [meta] schema = {SCHEMA}, found {schema}")
    sec = {s: {k: _parse_value(v) for k, v in cp[s].items()} for s in cp.sections()}
    for name in ("model",):
        if "channel_mult" in sec.get(name, {}):
            sec[name]["channel_mult"] = tuple(sec[name]["channel_mult"])
    run = RunConfig.from_dict({k: sec.get(k, {}) for k in ("model", "data", "base", "spatial", "temporal")})
    ev = EvalConfig.from_dict(sec.get("eval", {}))
    return run, ev


def dump_config(run: RunConfig, ev: EvalConfig | None = None) -> str:
    ev = ev or EvalConfig()
    d = run.to_dict()
    d["eval"] = asdict(ev)
    lines = ["[meta]", f"schema = {SCHEMA}", ""]
    for section in ("model", "data", "base", "spatial", "temporal", "eval"):
        lines.append(f"[{section}]")
        for k, v in d[section].items():
            if v is None:
                continue
            lines.append(f"{k} = {_format_value(list(v) if isinstance(v, tuple) else v)}")
        lines.append("")
    return "\n".join(lines)


def default_config() -> RunConfig:
    """The configuration used by the acceptance suite and the demos."""
    return RunConfig(
        model=UNetConfig(),
        data=DataConfig(corpus_size=256),
        base=TrainConfig(steps=6000, lr=2e-3, seed=0, cosine_decay=True, ah_mix=0.5),
        spatial=TrainConfig(steps=1000, lr=3e-3, seed=1, plan="spatial"),
        temporal=TrainConfig(steps=1000, lr=2e-3, seed=2, plan="tap"),
    )


def _config(args) -> tuple[RunConfig, EvalConfig]:
    if args.config:
        run, ev = load_config(args.config)
    else:
        run, ev = default_config(), EvalConfig()
    if getattr(args, "plan", None):
        run.temporal = replace(run.temporal, plan=args.plan)
    if getattr(args, "ah_phase", None) == "train":
        run.temporal = replace(run.temporal, ah_in_training=True)
    if getattr(args, "beta", None) is not None:
        run.temporal = replace(run.temporal, beta=args.beta)
        run.model = replace(run.model, beta_ah=args.beta)
    return run, ev


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_init(args) -> int:
    run, ev = _config(args)
    path = _out(args) / "config.ini"
    io.atomic_write_text(path, dump_config(run, ev))
    print(path)
    return 0


def cmd_synth(args) -> int:
    """Render the pretraining corpus, validation corpus and reference set."""
    run, _ = _config(args)
    out = _out(args)
    corpus, val, refs, _ = make_data(run)
    rows = []
    for split, clips in (("corpus", corpus), ("val", val), ("refs", refs)):
        for i, c in enumerate(clips):
            p = out / split / f"{i:04d}.tns"
            io.save_tensor(p, c)
            a = c.spec.appearance
            rows.append([split, p.name, c.spec.motion.value, a.shape.value, a.fg_bin, a.bg_bin, a.artifact is not None])
            if split == "refs":
                io.write_gif(c, out / split / f"{i:04d}.gif")
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "file", "motion", "shape", "fg_bin", "bg_bin", "artifact"])
        w.writerows(rows)
    print(f"wrote {len(rows)} clips to {out}")
    return 0


def cmd_pretrain(args) -> int:
    run, _ = _config(args)
    out = _out(args)
    corpus, val, _, _ = make_data(run)
    res = pretrain_base(corpus, replace(run.base, seed=run.base.seed + args.seed), run.model, val)
    io.save_model(out / "base.ckpt", res.model)
    with open(out / "pretrain_losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows([i, f"{v:.6f}"] for i, v in enumerate(res.losses))
    print(f"validation loss {res.val_loss:.5f}; checkpoint {out / 'base.ckpt'}")
    return 0


def cmd_customize(args) -> int:
    run, _ = _config(args)
    run.spatial = seeded(run.spatial, args.seed)
    run.temporal = seeded(run.temporal, args.seed)
    out = _out(args)
    cps = run_customization(run, out, base_checkpoint=args.base)
    print(cps.manifest.read_text())
    return 0


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {what}: {path}")
    return path


def cmd_sample(args) -> int:
    """Generate the prompt grid from a customization directory and score it."""
    run, ev = _config(args)
    src = Path(args.checkpoints)
    base = io.load_model(_require(src / "base.ckpt", "base checkpoint (run pretrain/customize)"))
    plan = io.load_plan(_require(src / "temporal.ckpt", "temporal adapters (run customize)"))
    lab = Lab(run, base, ev)
    targets = lab.targets(args.seed)
    ids = base.cond_ids([(lab.motion, a) for a in targets])
    m = run.model
    beta = m.beta_ah if args.beta is None else args.beta
    tau = 0 if args.tau is None else args.tau

    def adapted(z, t, c):
        return base(z, t, c, plan, skip_mode=args.skip_mode, beta=beta)

    def vanilla(z, t, c):
        return base(z, t, c)

    shape = (len(targets), m.frames, m.height, m.width, m.channels)
    clips = sample_pli(shape, ids, tau, adapted, vanilla, lab.sched, ev.sample_seed + 7919 * args.seed)
    out = _out(args)
    for i, c in enumerate(clips):
        io.save_tensor(out / f"sample_{i:03d}.tns", c)
        io.write_gif(c, out / f"sample_{i:03d}.gif")
        if args.ppm:
            io.write_ppm_frames(c, out / f"sample_{i:03d}_frames")
    tag = f"{args.skip_mode}_beta={beta:g}_tau={tau}"
    report = metric_suite(clips, targets, lab.artifact, lab.motion, lab.judges, variant=tag)
    write_reports_csv(out / "metrics.csv", [report])
    print(summary_text([report]))
    return 0


def cmd_probe(args) -> int:
    """Hidden-state similarity profiles and the motion-probe result for one seed."""
    run, ev = _config(args)
    out = _out(args)
    lab = Lab.build(run, ev, cache_dir=Path(args.cache_dir) if args.cache_dir else out / "cache")
    study = trace_study(lab, args.seed, beta=args.beta)
    for name, prof in study.profiles.items():
        prof.to_csv(out / f"similarity_{name}_vs_base.csv")
    text = (
        f"mean cosine AH vs base:  {study.sim_ah:.4f}\n"
        f"mean cosine TAP vs base: {study.sim_tap:.4f}\n"
        f"AH traces classified as TAP: {study.ah_as_tap:.3f} (mean confidence {study.confidence:.3f})\n"
    )
    io.atomic_write_text(out / "probe.txt", text)
    print(text, end="")
    return 0


def cmd_ablate(args) -> int:
    run, ev = _config(args)
    out = _out(args)
    lab = Lab.build(run, ev, cache_dir=Path(args.cache_dir) if args.cache_dir else out / "cache")
    seeds = [args.seed] if args.single_seed else None
    rows = run_suite(args.suite, lab, seeds)
    for p in write_suite(args.suite, rows, out):
        print(p)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motionlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="INI config (defaults to the built-in configuration)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out-dir", default=out_default)

    def knobs(sp):
        sp.add_argument("--plan", choices=PLANS)
        sp.add_argument("--beta", type=float)
        sp.add_argument("--ah-phase", choices=("train", "post"), default="post")

    sp = sub.add_parser("init", help="write the default config file")
    common(sp, ".")
    sp.set_defaults(fn=cmd_init)

    sp = sub.add_parser("synth", help="render the datasets")
    common(sp, "runs/data")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("pretrain", help="train the base network")
    common(sp, "runs/base")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("customize", help="spatial and temporal adaptation with a manifest")
    common(sp, "runs/custom")
    knobs(sp)
    sp.add_argument("--base", help="existing base checkpoint (otherwise pretrain first)")
    sp.set_defaults(fn=cmd_customize)

    sp = sub.add_parser("sample", help="generate and score the prompt grid")
    common(sp, "runs/samples")
    sp.add_argument("--checkpoints", default="runs/custom", help="directory holding base.ckpt and temporal.ckpt")
    sp.add_argument("--tau", type=int)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--skip-mode", choices=("vanilla", "ah"), default="vanilla")
    sp.add_argument("--ppm", action="store_true", help="also write per-frame PPM files")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("probe", help="hidden-state similarity and motion probe")
    common(sp, "runs/probe")
    sp.add_argument("--beta", type=float)
    sp.add_argument("--cache-dir")
    sp.set_defaults(fn=cmd_probe)

    sp = sub.add_parser("ablate", help="run an ablation suite")
    common(sp, "runs/ablate")
    sp.add_argument("--suite", choices=SUITES, required=True)
    sp.add_argument("--single-seed", action="store_true", help="only run --seed instead of the configured seeds")
    sp.add_argument("--cache-dir")
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, DependencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
