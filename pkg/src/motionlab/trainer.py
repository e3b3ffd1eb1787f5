"""Dual-path adaptation: base pretraining, spatial-path LoRA, temporal-path LoRA.

All randomness in a phase (batch indices, frames, timesteps, noise) comes from
generators seeded by that phase's ``TrainConfig.seed``, so a phase replays
bit-identically on the same machine and thread count.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import io
from .adapters import InjectionPlan, PlanMode, make_plan, plan_for
from .diffusion import make_schedule, to_latent, training_loss
from .errors import ConfigError, DependencyError, DivergenceError, PlanError
from .net import SkipMode, UNet, UNetConfig
from .synthvid import MOTIONS, ArtifactSpec, Motion, VideoClip, build_corpus, build_reference_set

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    plan: str = "tap"
    ah_in_training: bool = False
    beta: float = 1.1
    rank: int = 4
    lora_scale: float = 1.0
    schedule: str = "linear"
    T: int = 100
    checkpoint_every: int = 0
    optimizer: str = "adam"
    loss_threshold: float = 0.5
    motion_dropout: float = 0.15
    cosine_decay: bool = False
    ah_mix: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.steps <= 0 or self.batch_size <= 0:
            raise ConfigError("lr, steps and batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class PhaseResult:
    losses: list[float]
    model: UNet | None = None
    plan: InjectionPlan | None = None
    val_loss: float | None = None
    snapshots: list[dict] = field(default_factory=list)


def _optimizer(params, config: TrainConfig):
    params = list(params)
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.lr)
    return torch.optim.Adam(params, lr=config.lr)


def _lr_schedule(opt, config: TrainConfig):
    if not config.cosine_decay:
        return None
    return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.steps, eta_min=0.1 * config.lr)


def _labels(clips: list[VideoClip]) -> list[tuple]:
    out = []
    for c in clips:
        if c.spec is None:
            raise ConfigError("training clips need their ClipSpec for conditioning labels")
        out.append((c.spec.motion, c.spec.appearance))
    return out


def _forward(model: UNet, skip_mode=None, beta=None):
    def fn(z_t, t, cond, plan):
        return model(z_t, t, cond, plan, skip_mode=skip_mode, beta=beta)

    return fn


def _check_finite(loss: torch.Tensor, phase: str, step: int) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(f"{phase}: loss became {loss.item()} at step {step}")


def validation_loss(model: UNet, clips, config: TrainConfig, plan=None, seed: int = 12345, draws: int = 4) -> float:
    """Noise-prediction loss on ``clips`` averaged over fixed (t, eps) draws."""
    sched = make_schedule(config.schedule, config.T)
    z0 = to_latent(clips)
    ids = model.cond_ids(_labels(clips))
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        for _ in range(draws):
            t = torch.randint(1, sched.T + 1, (len(clips),), generator=gen)
            eps = torch.randn(z0.shape, generator=gen)
            total += training_loss(_forward(model), z0, ids, t, eps, plan, sched).item()
    return total / draws


@torch.enable_grad()
def pretrain_base(
    corpus: list[VideoClip],
    config: TrainConfig,
    model_config: UNetConfig | None = None,
    val_corpus: list[VideoClip] | None = None,
) -> PhaseResult:
    """Train every parameter of a fresh network on ``corpus``."""
    if not corpus:
        raise ConfigError("pretraining corpus is empty")
    torch.manual_seed(config.seed)
    model = UNet(model_config or UNetConfig(timesteps=config.T))
    if model.config.timesteps != config.T:
        raise ConfigError("model timesteps and schedule length differ")
    sched = make_schedule(config.schedule, config.T)
    z_all = to_latent(corpus)
    ids_all = model.cond_ids(_labels(corpus))
    gen = torch.Generator().manual_seed(config.seed)
    opt = _optimizer(model.parameters(), config)
    sched_lr = _lr_schedule(opt, config)
    losses = []
    fwd = _forward(model)
    for step in range(config.steps):
        idx = torch.randint(0, len(corpus), (config.batch_size,), generator=gen)
        t = torch.randint(1, sched.T + 1, (config.batch_size,), generator=gen)
        eps = torch.randn((config.batch_size,) + tuple(z_all.shape[1:]), generator=gen)
        ids = ids_all[idx].clone()
        drop = torch.rand(config.batch_size, generator=gen) < config.motion_dropout
        ids[drop, 0] = model.cond.NULL_MOTION
        # skip-route augmentation: some steps use the appearance highway
        if torch.rand((), generator=gen).item() < config.ah_mix:
            beta = 1.0 + 0.2 * torch.rand((), generator=gen).item()
            step_fwd = _forward(model, SkipMode.APPEARANCE_HIGHWAY, beta)
        else:
            step_fwd = fwd
        loss = training_loss(step_fwd, z_all[idx], ids, t, eps, None, sched)
        _check_finite(loss, "pretrain", step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if sched_lr is not None:
            sched_lr.step()
        losses.append(loss.item())
    model.eval()
    seen = {c.spec.motion for c in corpus}
    model.cond.tie_to_null([m for m in MOTIONS if m not in seen])
    val = validation_loss(model, val_corpus or corpus, config)
    log.info("pretrain: final train loss %.4f, validation %.4f", np.mean(losses[-50:]), val)
    if not np.isfinite(val):
        raise DivergenceError(f"pretrain: validation loss {val}")
    return PhaseResult(losses=losses, model=model, val_loss=val)


def freeze(model: UNet) -> UNet:
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@torch.enable_grad()
def _adapter_loop(model, plan, trainable: InjectionPlan, batch_fn, config, phase, skip_mode=None, beta=None):
    sched = make_schedule(config.schedule, config.T)
    gen = torch.Generator().manual_seed(config.seed)
    opt = _optimizer(trainable.parameters(), config)
    fwd = _forward(model, skip_mode, beta)
    losses, snaps = [], []
    for step in range(config.steps):
        z0, ids = batch_fn(gen)
        t = torch.randint(1, sched.T + 1, (z0.shape[0],), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        loss = training_loss(fwd, z0, ids, t, eps, plan, sched)
        _check_finite(loss, phase, step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            snaps.append({n: p.detach().clone() for n, p in trainable.named_parameters()})
    return losses, snaps


def train_spatial_path(base: UNet, refset: list[VideoClip], config: TrainConfig) -> PhaseResult:
    """Fit spatial self-attention LoRAs on single random frames of ``refset``."""
    if not refset:
        raise ConfigError("reference set is empty")
    plan = make_plan(PlanMode.SPATIAL_PATH, config.rank, config.lora_scale, base.config, seed=config.seed)
    return fit_spatial_plan(base, plan, refset, config)


def fit_spatial_plan(base: UNet, plan: InjectionPlan, refset, config: TrainConfig) -> PhaseResult:
    if any(p.endswith(".temporal") for p, _ in plan.paths()):
        raise PlanError("the spatial path may not adapt temporal slots")
    freeze(base)
    plan.requires_grad_(True)
    z_all = to_latent(refset)
    ids_all = base.cond_ids(_labels(refset))
    n, f = z_all.shape[:2]

    def batch(gen):
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        frame = torch.randint(0, f, (config.batch_size,), generator=gen)
        return z_all[idx, frame].unsqueeze(1), ids_all[idx]

    losses, snaps = _adapter_loop(base, plan, plan, batch, config, "spatial")
    plan.requires_grad_(False)
    return PhaseResult(losses=losses, plan=plan, snapshots=snaps)


def train_temporal_path(
    base: UNet,
    spatial_loras: InjectionPlan | None,
    refset: list[VideoClip],
    config: TrainConfig,
    plan: InjectionPlan | None = None,
) -> PhaseResult:
    """Fit temporal LoRAs on whole clips with the spatial LoRAs active and frozen."""
    if not refset:
        raise ConfigError("reference set is empty")
    if plan is None:
        plan = (
            make_plan(PlanMode.SPATIAL_PATH, 1, 1.0, base.config)
            if config.plan == "spatial"
            else plan_for(config.plan, config.rank, config.lora_scale, base.config, seed=config.seed)
        )
    if plan.mode is PlanMode.SPATIAL_PATH or any(not p.endswith(".temporal") for p, _ in plan.paths()):
        raise PlanError("the temporal path only adapts temporal blocks")
    base.check_plan(plan)
    freeze(base)
    if spatial_loras is not None:
        spatial_loras.requires_grad_(False)
        combined = spatial_loras.union(plan)
    else:
        combined = plan
    plan.requires_grad_(True)
    z_all = to_latent(refset)
    ids_all = base.cond_ids(_labels(refset))

    def batch(gen):
        idx = torch.randint(0, len(refset), (config.batch_size,), generator=gen)
        return z_all[idx], ids_all[idx]

    mode = SkipMode.APPEARANCE_HIGHWAY if config.ah_in_training else SkipMode.VANILLA
    losses, snaps = _adapter_loop(base, combined, plan, batch, config, "temporal", mode, config.beta)
    plan.requires_grad_(False)
    return PhaseResult(losses=losses, plan=plan, snapshots=snaps)


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class DataConfig:
    target_motion: str = "orbit"
    target_share: float = 0.05  # share of corpus clips showing the target motion; 0 holds it out
    corpus_size: int = 64
    val_size: int = 16
    refs: int = 3
    seed: int = 0
    artifact: bool = True


@dataclass
class RunConfig:
    model: UNetConfig = field(default_factory=UNetConfig)
    data: DataConfig = field(default_factory=DataConfig)
    base: TrainConfig = field(default_factory=lambda: TrainConfig(steps=2000, seed=0))
    spatial: TrainConfig = field(default_factory=lambda: TrainConfig(steps=300, seed=1, plan="spatial"))
    temporal: TrainConfig = field(default_factory=lambda: TrainConfig(steps=1000, seed=2, plan="tap"))

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "data": asdict(self.data),
            "base": asdict(self.base),
            "spatial": asdict(self.spatial),
            "temporal": asdict(self.temporal),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            model=UNetConfig.from_dict(d.get("model", {})),
            data=DataConfig(**d.get("data", {})),
            base=TrainConfig.from_dict(d.get("base", {})),
            spatial=TrainConfig.from_dict(d.get("spatial", {})),
            temporal=TrainConfig.from_dict(d.get("temporal", {})),
        )

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def make_data(cfg: RunConfig):
    """Pretraining corpus, validation corpus and reference set for ``cfg``."""
    m = cfg.model
    d = cfg.data
    kw = dict(frames=m.frames, height=m.height, width=m.width)
    if d.target_share > 0:
        mix = dict(rare_motion=d.target_motion, rare_share=d.target_share)
    else:
        mix = dict(exclude_motion=d.target_motion)
    corpus = build_corpus(d.corpus_size, d.seed, **mix, **kw)
    val = build_corpus(d.val_size, d.seed + 7919, **mix, **kw)
    artifact = ArtifactSpec() if d.artifact else None
    refs = build_reference_set(Motion(d.target_motion), d.refs, artifact, d.seed + 104729, **kw)
    return corpus, val, refs, artifact


@dataclass
class CheckpointSet:
    base: Path
    spatial: Path
    temporal: Path
    manifest: Path

    def inference_bundle(self) -> dict[str, Path]:
        """What generation needs: the base and the temporal LoRAs, never the spatial ones."""
        return {"base": self.base, "temporal": self.temporal}


def run_customization(cfg: RunConfig, out_dir, base_checkpoint=None) -> CheckpointSet:
    """Run pretraining (unless ``base_checkpoint`` is given), spatial path and temporal path.

    Writes three checkpoints and a manifest into ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus, val, refs, _ = make_data(cfg)
    metrics = {}
    if base_checkpoint is None:
        res = pretrain_base(corpus, cfg.base, cfg.model, val)
        base = res.model
        base_path = out / "base.ckpt"
        io.save_model(base_path, base)
        metrics["base"] = {"val_loss": res.val_loss, "final_loss": float(np.mean(res.losses[-10:]))}
    else:
        src = Path(base_checkpoint)
        if not src.exists():
            raise DependencyError(f"base checkpoint {src} is missing; run pretraining first")
        base = io.load_model(src)
        # keep the output directory self-contained
        base_path = out / "base.ckpt"
        if src.resolve() != base_path.resolve():
            shutil.copyfile(src, base_path)
    sp = train_spatial_path(base, refs, cfg.spatial)
    sp_path = out / "spatial.ckpt"
    io.save_plan(sp_path, sp.plan)
    tp = train_temporal_path(base, sp.plan, refs, cfg.temporal)
    tp_path = out / "temporal.ckpt"
    io.save_plan(tp_path, tp.plan)
    for name, r in (("spatial", sp), ("temporal", tp)):
        metrics[name] = {"first_loss": float(np.mean(r.losses[:10])), "final_loss": float(np.mean(r.losses[-10:]))}
    manifest = out / "manifest.txt"
    write_manifest(
        manifest,
        cfg,
        {"base": base_path, "spatial": sp_path, "temporal": tp_path},
        metrics,
    )
    return CheckpointSet(base_path, sp_path, tp_path, manifest)


def write_manifest(path, cfg: RunConfig, checkpoints: dict, metrics: dict) -> None:
    lines = ["[manifest]", "schema = 1", f"config_hash = {cfg.hash()}"]
    lines += [
        f"seed.data = {cfg.data.seed}",
        f"seed.base = {cfg.base.seed}",
        f"seed.spatial = {cfg.spatial.seed}",
        f"seed.temporal = {cfg.temporal.seed}",
        "",
        "[checkpoints]",
    ]
    for name, p in checkpoints.items():
        lines.append(f"{name} = {Path(p).name}")
        lines.append(f"{name}.sha256 = {io.file_digest(p)}")
    lines += ["", "[metrics]"]
    for phase, vals in metrics.items():
        for k, v in vals.items():
            lines.append(f"{phase}.{k} = {v:.6g}")
    lines += ["", "[config]", f"json = {json.dumps(cfg.to_dict(), sort_keys=True)}"]
    io.atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    import configparser

    cp = configparser.ConfigParser(interpolation=None)
    cp.read(path)
    return {s: dict(cp[s]) for s in cp.sections()}


def replay_manifest(path, out_dir) -> CheckpointSet:
    """Re-run the customization recorded in a manifest."""
    m = read_manifest(path)
    cfg = RunConfig.from_dict(json.loads(m["config"]["json"]))
    return run_customization(cfg, out_dir)


def clone_model(model: UNet) -> UNet:
    return copy.deepcopy(model)
