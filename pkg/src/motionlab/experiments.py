"""Experiment harness shared by the command line and the acceptance tests.

A :class:`Lab` owns one pretrained base network and lazily trains (and caches)
the adapters each variant needs. Suites return flat result rows, one per
(seed, variant), which :func:`write_suite` turns into CSV tables and SVG plots.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import io
from .adapters import InjectionPlan
from .diffusion import make_schedule, sample_pli
from .errors import ConfigError
from .net import HiddenStateTrace, UNet
from .plots import write_line_chart
from .probe import Judges, MetricsReport, cosine_profile, fit_probe, metric_suite, motion_features, probe_eval
from .synthvid import BG_PALETTE, FG_PALETTE, AppearanceSpec, ArtifactSpec, Motion, all_appearances, build_reference_set
from .trainer import RunConfig, TrainConfig, config_hash, make_data, pretrain_base, train_spatial_path, train_temporal_path

log = logging.getLogger(__name__)

METRICS = MetricsReport.METRICS
TABLE1_PLANS = ("full", "q", "k", "v", "ff", "qk")
BETA_GRID = (1.0, 1.05, 1.1, 1.15, 1.2)
SUITES = ("table1", "beta_sweep", "ah_train_vs_post", "pli", "components")


@dataclass
class EvalConfig:
    """Prompt grid and sampling settings for one evaluation."""

    prompts: int = 6
    samples_per_prompt: int = 8
    sample_seed: int = 7
    seeds: tuple[int, ...] = (0, 1, 2)
    probe_steps: int = 4

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        d = dict(d)
        if "seeds" in d:
            d["seeds"] = tuple(int(s) for s in d["seeds"])
        return cls(**d)


@dataclass(frozen=True)
class Variant:
    """One generation setting: which temporal adapters, skip routing and sampler split."""

    name: str
    plan: str | None = None  # None means the bare base network
    ah_in_training: bool = False
    skip_mode: str = "vanilla"
    beta: float = 1.1
    vanilla_scale: float = 1.0
    tau: int = 0

    def key(self) -> dict:
        return asdict(self)


def prompt_grid(refs, n: int, seed: int) -> list[AppearanceSpec]:
    """``n`` appearances that share neither their (shape, fg, bg) triple nor their fg colour with ``refs``."""
    used_fg = {c.spec.appearance.fg_bin for c in refs}
    pool = [a for a in all_appearances() if a[1] not in used_fg]
    if len(pool) < n:
        raise ConfigError("not enough held-out appearances for the prompt grid")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(pool), size=n, replace=False)
    return [AppearanceSpec(pool[i][0], tuple(FG_PALETTE[pool[i][1]]), tuple(BG_PALETTE[pool[i][2]])) for i in picks]


def seeded(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seed=config.seed + 1000 * seed)


class Lab:
    """Base network plus lazily trained, cached adapters for a set of seeds."""

    def __init__(self, cfg: RunConfig, base: UNet, eval_cfg: EvalConfig | None = None, judges: Judges | None = None, cache_dir=None):
        self.cfg = cfg
        self.base = base.eval()
        self.eval_cfg = eval_cfg or EvalConfig()
        m = cfg.model
        self.judges = judges or Judges.train(frames=m.frames, height=m.height, width=m.width)
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.sched = make_schedule(cfg.base.schedule, cfg.base.T)
        self.motion = Motion(cfg.data.target_motion)
        self.artifact = ArtifactSpec() if cfg.data.artifact else None
        self._spatial: dict[int, InjectionPlan] = {}
        self._temporal: dict[tuple, InjectionPlan] = {}
        self._reports: dict[tuple, MetricsReport] = {}

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, cfg: RunConfig, eval_cfg: EvalConfig | None = None, cache_dir=None) -> "Lab":
        """Load the base from ``cache_dir`` when present, otherwise pretrain (and cache) it."""
        path = Path(cache_dir) / f"base-{base_hash(cfg)}.ckpt" if cache_dir else None
        if path is not None and path.exists():
            base = io.load_model(path)
        else:
            corpus, val, _, _ = make_data(cfg)
            base = pretrain_base(corpus, cfg.base, cfg.model, val).model
            if path is not None:
                io.save_model(path, base)
        return cls(cfg, base, eval_cfg, cache_dir=cache_dir)

    # -- data ---------------------------------------------------------------

    def refs(self, seed: int):
        m, d = self.cfg.model, self.cfg.data
        return build_reference_set(
            self.motion, d.refs, self.artifact, d.seed + 104729 + 1000 * seed, frames=m.frames, height=m.height, width=m.width
        )

    def targets(self, seed: int) -> list[AppearanceSpec]:
        e = self.eval_cfg
        grid = prompt_grid(self.refs(seed), e.prompts, self.cfg.data.seed + 50 + seed)
        return [a for a in grid for _ in range(e.samples_per_prompt)]

    # -- adapters -----------------------------------------------------------

    def _cached(self, kind: str, key: dict, train):
        path = None
        if self.cache_dir is not None:
            path = self.cache_dir / f"{kind}-{config_hash(key)}.ckpt"
            if path.exists():
                return io.load_plan(path)
        plan = train()
        if path is not None:
            io.save_plan(path, plan, self.cfg.model)
        return plan

    def spatial(self, seed: int) -> InjectionPlan:
        if seed not in self._spatial:
            tc = seeded(self.cfg.spatial, seed)
            key = {"base": base_hash(self.cfg), "data": asdict(self.cfg.data), "spatial": asdict(tc), "seed": seed}
            self._spatial[seed] = self._cached("spatial", key, lambda: train_spatial_path(self.base, self.refs(seed), tc).plan)
        return self._spatial[seed]

    def temporal(self, seed: int, plan: str, ah_in_training: bool = False, beta: float | None = None) -> InjectionPlan:
        tc = replace(seeded(self.cfg.temporal, seed), plan=plan, ah_in_training=ah_in_training)
        if beta is not None:
            tc = replace(tc, beta=beta)
        k = (seed, plan, ah_in_training, tc.beta)
        if k not in self._temporal:
            key = {
                "base": base_hash(self.cfg),
                "data": asdict(self.cfg.data),
                "spatial": asdict(seeded(self.cfg.spatial, seed)),
                "temporal": asdict(tc),
                "seed": seed,
            }
            sp = self.spatial(seed)
            self._temporal[k] = self._cached(
                "temporal", key, lambda: train_temporal_path(self.base, sp, self.refs(seed), tc).plan
            )
        return self._temporal[k]

    def variant_plan(self, seed: int, v: Variant) -> InjectionPlan | None:
        if v.plan is None:
            return None
        return self.temporal(seed, v.plan, v.ah_in_training, v.beta if v.ah_in_training else None)

    def variant_hash(self, v: Variant) -> str:
        return config_hash({"run": self.cfg.to_dict(), "eval": asdict(self.eval_cfg), "variant": v.key()})

    # -- generation ---------------------------------------------------------

    def sample(self, seed: int, v: Variant, trace: HiddenStateTrace | None = None, sample_seed: int | None = None):
        """Clips for the seed's prompt grid; the spatial adapters are never used here."""
        plan = self.variant_plan(seed, v)
        targets = self.targets(seed)
        ids = self.base.cond_ids([(self.motion, a) for a in targets])
        m = self.cfg.model

        def adapted(z, t, c):
            return self.base(z, t, c, plan, trace=trace, skip_mode=v.skip_mode, beta=v.beta, vanilla_scale=v.vanilla_scale)

        def vanilla(z, t, c):
            return self.base(z, t, c, None, trace=trace)

        shape = (len(targets), m.frames, m.height, m.width, m.channels)
        s = self.eval_cfg.sample_seed + 7919 * seed if sample_seed is None else sample_seed
        return sample_pli(shape, ids, v.tau, adapted, vanilla, self.sched, s), targets

    def evaluate(self, seed: int, v: Variant) -> MetricsReport:
        k = (seed, v)
        if k not in self._reports:
            with torch.no_grad():
                clips, targets = self.sample(seed, v)
            self._reports[k] = metric_suite(clips, targets, self.artifact, self.motion, self.judges, variant=v.name)
        return self._reports[k]

    def row(self, seed: int, v: Variant, **extra) -> dict:
        r = self.evaluate(seed, v)
        return {"seed": seed, "variant": v.name, **extra, **r.as_dict(), "config_hash": self.variant_hash(v)}


def base_hash(cfg: RunConfig) -> str:
    return config_hash({"model": cfg.model.to_dict(), "data": asdict(cfg.data), "base": asdict(cfg.base)})


# ---------------------------------------------------------------------------
# suites


def table1_variants() -> list[Variant]:
    names = {"full": "FullTemporal", "q": "Q", "k": "K", "v": "V", "ff": "FF", "qk": "QK"}
    return [Variant("base")] + [Variant(names[p], plan=p) for p in TABLE1_PLANS]


def suite_table1(lab: Lab, seeds=None) -> list[dict]:
    return [lab.row(s, v) for s in seeds or lab.eval_cfg.seeds for v in table1_variants()]


def beta_variants(betas=BETA_GRID) -> list[Variant]:
    out = [Variant(f"ah_beta={b:g}", plan="k", skip_mode="ah", beta=b) for b in betas]
    out += [Variant(f"vanilla_scale={b:g}", plan="k", vanilla_scale=b) for b in betas]
    return out


def suite_beta_sweep(lab: Lab, seeds=None, betas=BETA_GRID) -> list[dict]:
    rows = []
    for s in seeds or lab.eval_cfg.seeds:
        for v in beta_variants(betas):
            knob = v.beta if v.skip_mode == "ah" else v.vanilla_scale
            rows.append(lab.row(s, v, skip_mode=v.skip_mode, knob=knob))
    return rows


def ah_phase_variants(beta: float | None = None) -> list[Variant]:
    b = 1.1 if beta is None else beta
    return [
        Variant("TAP", plan="k"),
        Variant("AH_post", plan="k", skip_mode="ah", beta=b),
        Variant("AH_train", plan="k", ah_in_training=True, skip_mode="ah", beta=b),
    ]


def suite_ah_train_vs_post(lab: Lab, seeds=None, beta: float | None = None) -> list[dict]:
    return [lab.row(s, v) for s in seeds or lab.eval_cfg.seeds for v in ah_phase_variants(beta)]


def pli_variants(T: int, plan: str = "k") -> list[Variant]:
    taus = (0, int(round(0.3 * T)), T)
    return [Variant(f"tau={t}", plan=plan, tau=t) for t in taus]


def suite_pli(lab: Lab, seeds=None, plan: str = "k") -> list[dict]:
    rows = []
    for s in seeds or lab.eval_cfg.seeds:
        for v in pli_variants(lab.sched.T, plan):
            rows.append(lab.row(s, v, tau=v.tau))
        rows.append(lab.row(s, Variant("base")))
    return rows


def component_variants(T: int, beta: float = 1.1) -> list[Variant]:
    tau = int(round(0.3 * T))
    return [
        Variant("base"),
        Variant("FullTemporal", plan="full"),
        Variant("+TAP", plan="k"),
        Variant("+TAP+AH", plan="k", skip_mode="ah", beta=beta),
        Variant("+TAP+AH+PLI", plan="k", skip_mode="ah", beta=beta, tau=tau),
    ]


def suite_components(lab: Lab, seeds=None) -> list[dict]:
    return [lab.row(s, v) for s in seeds or lab.eval_cfg.seeds for v in component_variants(lab.sched.T, lab.cfg.model.beta_ah)]


def run_suite(name: str, lab: Lab, seeds=None) -> list[dict]:
    fns = {
        "table1": suite_table1,
        "beta_sweep": suite_beta_sweep,
        "ah_train_vs_post": suite_ah_train_vs_post,
        "pli": suite_pli,
        "components": suite_components,
    }
    if name not in fns:
        raise ConfigError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    return fns[name](lab, seeds)


# ---------------------------------------------------------------------------
# hidden-state analysis


@dataclass
class TraceStudy:
    """Per-seed result of the hidden-state comparison between base, TAP and AH."""

    sim_ah: float
    sim_tap: float
    ah_as_tap: float
    confidence: float
    profiles: dict = field(default_factory=dict)


def trace_features(trace: HiddenStateTrace, steps, levels=None) -> np.ndarray:
    """Per-sample motion features of decoder hidden states, concatenated over steps and levels."""
    levels = sorted({lvl for lvl, _ in trace.keys()}) if levels is None else levels
    per = []
    for lvl in levels:
        for st in steps:
            h = trace.states[(lvl, st)]
            per.append(np.stack([motion_features(sample) for sample in h]))
    return np.concatenate(per, axis=1)


def trace_study(lab: Lab, seed: int, beta: float | None = None) -> TraceStudy:
    """Similarity to the base and motion-probe classification of AH hidden states.

    The probe is fitted on TAP (positive) and base (negative) traces from one
    sampling seed, then applied to AH traces from a different sampling seed.
    """
    b = lab.cfg.model.beta_ah if beta is None else beta
    tap = Variant("TAP", plan="k")
    ah = Variant("AH", plan="k", skip_mode="ah", beta=b)
    base = Variant("base")
    T = lab.sched.T
    steps = sorted({int(x) for x in np.linspace(T, 1, lab.eval_cfg.probe_steps).round()})
    s_fit = lab.eval_cfg.sample_seed + 7919 * seed
    s_test = s_fit + 1

    traces = {}
    with torch.no_grad():
        for sample_seed in (s_fit, s_test):
            for v in (base, tap, ah):
                tr = HiddenStateTrace(v.name)
                lab.sample(seed, v, trace=tr, sample_seed=sample_seed)
                traces[(v.name, sample_seed)] = tr
    prof_ah = cosine_profile(traces[("AH", s_fit)], traces[("base", s_fit)])
    prof_tap = cosine_profile(traces[("TAP", s_fit)], traces[("base", s_fit)])
    pos = trace_features(traces[("TAP", s_fit)], steps)
    neg = trace_features(traces[("base", s_fit)], steps)
    probe = fit_probe(pos, neg)
    labels, conf = probe_eval(probe, trace_features(traces[("AH", s_test)], steps))
    return TraceStudy(
        sim_ah=prof_ah.mean(),
        sim_tap=prof_tap.mean(),
        ah_as_tap=float(np.mean(labels == 1)),
        confidence=float(np.mean(conf)),
        profiles={"AH": prof_ah, "TAP": prof_tap},
    )


# ---------------------------------------------------------------------------
# reporting


def medians(rows: list[dict], metric: str, by: str = "variant") -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[by], []).append(r[metric])
    return {k: float(np.median(v)) for k, v in groups.items()}


def write_rows_csv(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0].keys()) if rows else []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return path


def ranked_table(rows: list[dict], key: str = "motion_acc") -> list[dict]:
    """Per-variant medians over seeds, sorted by ``key`` (descending)."""
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    hashes = {r["variant"]: r["config_hash"] for r in rows}
    out = []
    for v in variants:
        sel = [r for r in rows if r["variant"] == v]
        entry = {"variant": v, "seeds": len(sel)}
        entry.update({m: float(np.median([r[m] for r in sel])) for m in METRICS})
        entry["config_hash"] = hashes[v]
        out.append(entry)
    out.sort(key=lambda e: -e[key])
    for i, e in enumerate(out, 1):
        e["rank"] = i
    return out


def write_suite(name: str, rows: list[dict], out_dir) -> list[Path]:
    """Raw rows, a ranked median table and metric-vs-knob SVG plots."""
    out = Path(out_dir)
    paths = [write_rows_csv(out / f"{name}.csv", rows), write_rows_csv(out / f"{name}_ranked.csv", ranked_table(rows))]
    if name == "beta_sweep":
        for m in ("app_leak", "motion_acc", "app_align"):
            series = {}
            for mode, label in (("ah", "appearance highway"), ("vanilla", "scaled temporal skip")):
                sel = [r for r in rows if r["skip_mode"] == mode]
                knobs = sorted({r["knob"] for r in sel})
                series[label] = (knobs, [float(np.median([r[m] for r in sel if r["knob"] == k])) for k in knobs])
            paths.append(write_line_chart(out / f"{name}_{m}.svg", series, title=f"{m} vs scale", xlabel="scale", ylabel=m))
    elif name == "pli":
        sel = [r for r in rows if "tau" in r and r.get("tau") != ""]
        taus = sorted({r["tau"] for r in sel})
        series = {m: (taus, [float(np.median([r[m] for r in sel if r["tau"] == t])) for t in taus]) for m in METRICS}
        paths.append(write_line_chart(out / f"{name}.svg", series, title="metrics vs tau", xlabel="tau", ylabel="value"))
    else:
        ranked = ranked_table(rows)
        xs = list(range(len(ranked)))
        series = {m: (xs, [e[m] for e in ranked]) for m in METRICS}
        paths.append(
            write_line_chart(out / f"{name}.svg", series, title=f"{name} (variants by rank)", xlabel="rank - 1", ylabel="value")
        )
    return paths
