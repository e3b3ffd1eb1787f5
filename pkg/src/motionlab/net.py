"""Miniature spatial-temporal denoising U-Net.

Each resolution level runs a conv residual block, a spatial transformer
(self-attention over the tokens of one frame, cross-attention to the
conditioning tokens, feed-forward) and a temporal transformer (self-attention
over frames at each spatial location, feed-forward). Encoder levels expose both
the spatial and the temporal output so the skip connection can start from
either one.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .adapters import SLOTS, InjectionPlan, lora_apply, merge
from .errors import ConfigError, PlanError, ShapeError, VocabularyError
from .synthvid import BG_PALETTE, FG_PALETTE, MOTIONS, SHAPES, AppearanceSpec, Motion


class SkipMode(str, enum.Enum):
    VANILLA = "vanilla"
    APPEARANCE_HIGHWAY = "ah"


@dataclass
class UNetConfig:
    levels: int = 2
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2)
    heads: int = 2
    patch: int = 2
    skip_mode: SkipMode = SkipMode.VANILLA
    beta_ah: float = 1.1
    ah_levels: tuple[bool, ...] | None = None
    time_embed_dim: int = 32
    cond_embed_dim: int = 32
    temporal_zero_init: bool = True
    timesteps: int = 100
    frames: int = 8
    height: int = 16
    width: int = 16
    channels: int = 3

    def __post_init__(self):
        self.skip_mode = SkipMode(self.skip_mode)
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        if self.ah_levels is not None:
            self.ah_levels = tuple(bool(v) for v in self.ah_levels)
            if len(self.ah_levels) != self.levels:
                raise ConfigError("ah_levels needs one flag per level")
        if len(self.channel_mult) != self.levels:
            raise ConfigError("channel_mult needs one entry per level")
        for ch in self.level_channels():
            if ch % self.heads:
                raise ConfigError(f"channels {ch} not divisible by {self.heads} heads")
        if self.skip_mode is SkipMode.APPEARANCE_HIGHWAY and self.beta_ah <= 0:
            raise ConfigError("beta must be positive for the appearance highway")
        if self.beta_ah < 0:
            raise ConfigError("beta must be non-negative")
        down = self.patch * 2 ** (self.levels - 1)
        if self.height % down or self.width % down:
            raise ConfigError(f"frame size must be divisible by {down}")

    def level_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]

    def block_paths(self) -> list[str]:
        paths = []
        for stage, order in (("down", range(self.levels)), ("up", reversed(range(self.levels)))):
            for lvl in order:
                paths += [f"{stage}.{lvl}.spatial", f"{stage}.{lvl}.temporal"]
        return paths

    def slot_shape(self, path: str, slot: str) -> tuple[int, int]:
        """``(d_out, d_in)`` of the weight behind ``(path, slot)``."""
        if path not in self.block_paths() or slot not in SLOTS:
            raise PlanError(f"no adaptable weight at ({path!r}, {slot!r})")
        d = self.level_channels()[int(path.split(".")[1])]
        return {"FF1": (4 * d, d), "FF2": (d, 4 * d)}.get(slot, (d, d))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["skip_mode"] = self.skip_mode.value
        out["channel_mult"] = list(self.channel_mult)
        out["ah_levels"] = None if self.ah_levels is None else list(self.ah_levels)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def sinusoidal(pos: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = pos.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def time_embed(t, dim: int = 32) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps; entries lie in [-1, 1]."""
    t = torch.as_tensor(t).reshape(-1)
    return sinusoidal(t, dim).float()


def grid_embed(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sin/cos position code, ``(h*w, dim)``."""
    rows = torch.arange(h).repeat_interleave(w)
    cols = torch.arange(w).repeat(h)
    half = dim // 2
    return torch.cat([sinusoidal(rows, half), sinusoidal(cols, dim - half)], dim=1).float()


class AttentionParams(nn.Module):
    """Query/key/value/output projections of one attention layer."""

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None, zero_out: bool = False):
        super().__init__()
        kv_dim = kv_dim or dim
        self.heads = heads
        self.W_Q = nn.Parameter(torch.empty(dim, dim))
        self.W_K = nn.Parameter(torch.empty(dim, kv_dim))
        self.W_V = nn.Parameter(torch.empty(dim, kv_dim))
        self.W_O = nn.Parameter(torch.empty(dim, dim))
        for w in (self.W_Q, self.W_K, self.W_V, self.W_O):
            nn.init.xavier_uniform_(w)
        if zero_out:
            nn.init.zeros_(self.W_O)


class FeedForwardParams(nn.Module):
    def __init__(self, dim: int, mult: int = 4, zero_out: bool = False):
        super().__init__()
        self.fc1 = nn.Linear(dim, mult * dim)
        self.fc2 = nn.Linear(mult * dim, dim)
        if zero_out:
            nn.init.zeros_(self.fc2.weight)
            nn.init.zeros_(self.fc2.bias)

    def forward(self, x, adapters=None):
        adapters = adapters or {}
        h = lora_apply(self.fc1.weight, x, adapters.get("FF1"), self.fc1.bias)
        return lora_apply(self.fc2.weight, F.gelu(h), adapters.get("FF2"), self.fc2.bias)


def attention(
    x_q: torch.Tensor,
    x_kv: torch.Tensor,
    params: AttentionParams,
    adapters: dict | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product multi-head attention; ``x_q (n, lq, d)``, ``x_kv (n, lk, d_kv)``.

    ``adapters`` maps slot names ``Q``/``K``/``V`` to low-rank adapters on the
    matching projection.
    """
    adapters = adapters or {}
    if x_q.ndim != 3 or x_kv.ndim != 3 or x_q.shape[0] != x_kv.shape[0]:
        raise ShapeError(f"attention inputs {tuple(x_q.shape)} / {tuple(x_kv.shape)} do not conform")
    if x_q.shape[-1] != params.W_Q.shape[1] or x_kv.shape[-1] != params.W_K.shape[1]:
        raise ShapeError("attention input widths do not match the projections")
    h = params.heads
    q = lora_apply(params.W_Q, x_q, adapters.get("Q"))
    k = lora_apply(params.W_K, x_kv, adapters.get("K"))
    v = lora_apply(params.W_V, x_kv, adapters.get("V"))
    q, k, v = (rearrange(a, "n l (h e) -> n h l e", h=h) for a in (q, k, v))
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    weights = scores.softmax(dim=-1)
    out = rearrange(weights @ v, "n h l e -> n l (h e)")
    out = lora_apply(params.W_O, out)
    return (out, weights) if return_weights else out


def skip_source(spatial_out, temporal_out, mode: SkipMode | str, beta: float = 1.1, vanilla_scale: float = 1.0):
    """Where a skip connection starts: the temporal output, or ``beta`` x the spatial output."""
    if spatial_out.shape != temporal_out.shape:
        raise ShapeError(f"skip sources differ in shape: {tuple(spatial_out.shape)} vs {tuple(temporal_out.shape)}")
    if SkipMode(mode) is SkipMode.APPEARANCE_HIGHWAY:
        return beta * spatial_out
    return temporal_out if vanilla_scale == 1.0 else vanilla_scale * temporal_out


class SpatialTransformer(nn.Module):
    def __init__(self, dim: int, heads: int, cond_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = AttentionParams(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross = AttentionParams(dim, heads, kv_dim=cond_dim)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = FeedForwardParams(dim)

    def forward(self, x, h: int, w: int, cond, adapters):
        # x: (n, c, h, w) per frame -> tokens
        tok = rearrange(x, "n c h w -> n (h w) c")
        a = self.norm1(tok)
        tok = tok + attention(a, a, self.attn, adapters)
        tok = tok + attention(self.norm2(tok), cond, self.cross)
        tok = tok + self.ff(self.norm3(tok), adapters)
        return rearrange(tok, "n (h w) c -> n c h w", h=h, w=w)


class TemporalTransformer(nn.Module):
    def __init__(self, dim: int, heads: int, max_frames: int, zero_init: bool):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = AttentionParams(dim, heads, zero_out=zero_init)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForwardParams(dim, zero_out=zero_init)
        self.register_buffer("frame_pos", sinusoidal(torch.arange(max_frames), dim).float(), persistent=False)

    def forward(self, x, frames: int, adapters):
        n, c, h, w = x.shape
        tok = rearrange(x, "(b f) c h w -> (b h w) f c", f=frames)
        if frames > self.frame_pos.shape[0]:
            raise ShapeError(f"{frames} frames exceed the configured maximum {self.frame_pos.shape[0]}")
        a = self.norm1(tok) + self.frame_pos[:frames].to(tok.dtype)
        tok = tok + attention(a, a, self.attn, adapters)
        tok = tok + self.ff(self.norm2(tok), adapters)
        return rearrange(tok, "(b h w) f c -> (b f) c h w", h=h, w=w)


class ResBlock(nn.Module):
    def __init__(self, ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, ch)
        self.norm2 = nn.GroupNorm(8, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class Level(nn.Module):
    def __init__(self, ch: int, cfg: UNetConfig, temb_dim: int):
        super().__init__()
        self.res = ResBlock(ch, temb_dim)
        self.spatial = SpatialTransformer(ch, cfg.heads, cfg.cond_embed_dim)
        self.temporal = TemporalTransformer(ch, cfg.heads, cfg.frames, cfg.temporal_zero_init)


class ConditionEmbedder(nn.Module):
    """Learned tables for motion, shape, foreground-colour bin and background-colour bin."""

    NULL_MOTION = len(MOTIONS)

    def __init__(self, dim: int):
        super().__init__()
        # the extra last row is the "no motion given" token used for label dropout
        self.motion = nn.Embedding(len(MOTIONS) + 1, dim)
        self.shape = nn.Embedding(len(SHAPES), dim)
        self.fg = nn.Embedding(len(FG_PALETTE), dim)
        self.bg = nn.Embedding(len(BG_PALETTE), dim)

    def ids(self, motion, appearance: AppearanceSpec) -> tuple[int, int, int, int]:
        try:
            m = MOTIONS.index(Motion(motion))
        except ValueError as exc:
            raise VocabularyError(f"unknown motion label {motion!r}") from exc
        try:
            s = SHAPES.index(appearance.shape)
        except ValueError as exc:
            raise VocabularyError(f"unknown shape {appearance.shape!r}") from exc
        return m, s, appearance.fg_bin, appearance.bg_bin

    @torch.no_grad()
    def tie_to_null(self, motions) -> None:
        """Point the rows of ``motions`` at the null token (for labels never trained)."""
        for m in motions:
            self.motion.weight[MOTIONS.index(Motion(m))] = self.motion.weight[self.NULL_MOTION]

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        # ids: (b, 4) -> tokens (b, 4, dim)
        return torch.stack(
            [self.motion(ids[:, 0]), self.shape(ids[:, 1]), self.fg(ids[:, 2]), self.bg(ids[:, 3])], dim=1
        )


@dataclass
class HiddenStateTrace:
    """Decoder hidden states after the skip-merge projection, keyed by ``(level, step)``."""

    tag: str = ""
    states: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def record(self, level: int, step: int, value: torch.Tensor) -> None:
        self.states[(level, step)] = value.detach().cpu().numpy()

    def keys(self) -> list[tuple[int, int]]:
        return sorted(self.states)


class UNet(nn.Module):
    def __init__(self, config: UNetConfig | None = None):
        super().__init__()
        cfg = config or UNetConfig()
        self.config = cfg
        chs = cfg.level_channels()
        temb_dim = 4 * cfg.time_embed_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.cond = ConditionEmbedder(cfg.cond_embed_dim)
        p = cfg.patch
        self.patch_in = nn.Conv2d(cfg.channels, chs[0], p, stride=p)
        self.down = nn.ModuleList([Level(ch, cfg, temb_dim) for ch in chs])
        self.downsample = nn.ModuleList(
            [nn.Conv2d(chs[i - 1], chs[i], 3, stride=2, padding=1) for i in range(1, cfg.levels)]
        )
        self.up = nn.ModuleList([Level(ch, cfg, temb_dim) for ch in chs])
        self.upsample = nn.ModuleList([nn.Conv2d(chs[i + 1], chs[i], 3, padding=1) for i in range(cfg.levels - 1)])
        self.merge = nn.ModuleList([nn.Conv2d(2 * ch, ch, 1) for ch in chs])
        self.norm_out = nn.GroupNorm(8, chs[0])
        self.patch_out = nn.Conv2d(chs[0], cfg.channels * p * p, 1)
        hs = [(cfg.height // p) >> i for i in range(cfg.levels)]
        ws = [(cfg.width // p) >> i for i in range(cfg.levels)]
        for i, ch in enumerate(chs):
            self.register_buffer(f"pos{i}", grid_embed(hs[i], ws[i], ch).T.reshape(ch, hs[i], ws[i]), persistent=False)

    def _adapters(self, plan: InjectionPlan | None, path: str) -> dict:
        if plan is None:
            return {}
        return {slot: a for (p, slot), a in plan.entries.items() if p == path}

    def check_plan(self, plan: InjectionPlan | None) -> None:
        if plan is None:
            return
        paths = set(self.config.block_paths())
        for (path, slot), adapter in plan.entries.items():
            if path not in paths or slot not in SLOTS:
                raise PlanError(f"plan targets nonexistent submodule ({path!r}, {slot!r})")
            if (adapter.d_out, adapter.d_in) != self.config.slot_shape(path, slot):
                raise PlanError(f"adapter at ({path!r}, {slot!r}) has the wrong shape")

    def cond_ids(self, labels) -> torch.Tensor:
        """``labels``: iterable of ``(motion, AppearanceSpec)`` pairs -> ``(b, 4)`` ids."""
        return torch.tensor([self.cond.ids(m, a) for m, a in labels], dtype=torch.long)

    def forward(
        self,
        z: torch.Tensor,
        t,
        cond: torch.Tensor,
        plan: InjectionPlan | None = None,
        trace: HiddenStateTrace | None = None,
        skip_mode: SkipMode | str | None = None,
        beta: float | None = None,
        vanilla_scale: float = 1.0,
    ) -> torch.Tensor:
        """Predict the noise in ``z`` (``b, f, h, w, c``).

        ``cond`` is either integer label ids ``(b, 4)`` or precomputed
        conditioning tokens ``(b, n_tok, cond_embed_dim)``.
        """
        cfg = self.config
        if z.ndim != 5 or z.shape[2:] != (cfg.height, cfg.width, cfg.channels):
            raise ShapeError(f"latent shape {tuple(z.shape)} does not match the model config")
        b, f = z.shape[:2]
        self.check_plan(plan)
        mode = SkipMode(skip_mode or cfg.skip_mode)
        beta = cfg.beta_ah if beta is None else beta
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        if torch.any(t < 1) or torch.any(t > cfg.timesteps):
            raise ShapeError(f"timestep outside [1, {cfg.timesteps}]")
        temb = self.time_mlp(time_embed(t, cfg.time_embed_dim).to(z.dtype))
        temb = temb.repeat_interleave(f, dim=0)
        tokens = self.cond(cond) if cond.dtype == torch.long else cond
        if tokens.shape[0] != b:
            raise ShapeError("conditioning batch does not match latent batch")
        tokens = tokens.to(z.dtype).repeat_interleave(f, dim=0)

        x = rearrange(z, "b f h w c -> (b f) c h w")
        x = self.patch_in(x)
        skips = []
        for lvl, level in enumerate(self.down):
            if lvl > 0:
                x = self.downsample[lvl - 1](x)
            x = x + getattr(self, f"pos{lvl}").to(x.dtype)
            x = level.res(x, temb)
            hh, ww = x.shape[-2:]
            sp = level.spatial(x, hh, ww, tokens, self._adapters(plan, f"down.{lvl}.spatial"))
            tp = level.temporal(sp, f, self._adapters(plan, f"down.{lvl}.temporal"))
            use_ah = cfg.ah_levels is None or cfg.ah_levels[lvl]
            skips.append(skip_source(sp, tp, mode if use_ah else SkipMode.VANILLA, beta, vanilla_scale))
            x = tp
        for lvl in reversed(range(cfg.levels)):
            if lvl < cfg.levels - 1:
                x = self.upsample[lvl](F.interpolate(x, scale_factor=2, mode="nearest"))
            x = self.merge[lvl](torch.cat([skips[lvl], x], dim=1))
            if trace is not None:
                trace.record(lvl, int(t[0]), rearrange(x, "(b f) c h w -> b f h w c", b=b))
            level = self.up[lvl]
            x = level.res(x, temb)
            hh, ww = x.shape[-2:]
            x = level.spatial(x, hh, ww, tokens, self._adapters(plan, f"up.{lvl}.spatial"))
            x = level.temporal(x, f, self._adapters(plan, f"up.{lvl}.temporal"))
        x = self.patch_out(F.silu(self.norm_out(x)))
        x = F.pixel_shuffle(x, cfg.patch)
        return rearrange(x, "(b f) c h w -> b f h w c", b=b)


def cond_embed(model: UNet, motion, appearance: AppearanceSpec) -> torch.Tensor:
    """Conditioning tokens ``(4, cond_embed_dim)`` for one label pair."""
    ids = torch.tensor([model.cond.ids(motion, appearance)], dtype=torch.long)
    return model.cond(ids)[0]


SLOT_PARAM = {"Q": "attn.W_Q", "K": "attn.W_K", "V": "attn.W_V", "FF1": "ff.fc1.weight", "FF2": "ff.fc2.weight"}


def param_name(path: str, slot: str) -> str:
    """State-dict name of the weight adapted at ``(path, slot)``, e.g. ``down.0.temporal.attn.W_K``."""
    return f"{path}.{SLOT_PARAM[slot]}"


def merged_state_dict(model: UNet, plan: InjectionPlan | None) -> dict[str, torch.Tensor]:
    """Base weights with every adapter of ``plan`` folded in."""
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    if plan is None:
        return state
    model.check_plan(plan)
    for (path, slot), adapter in plan.entries.items():
        name = param_name(path, slot)
        state[name] = merge(state[name], adapter)
    return state


def temporal_weight_names(model: UNet) -> list[str]:
    return [n for n, _ in model.named_parameters() if ".temporal." in n]
