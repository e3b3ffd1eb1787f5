"""Low-rank adapters and declarative injection plans.

A plan maps ``(block path, slot)`` pairs to :class:`LoraAdapter` instances. The
network looks adapters up by its own block paths at forward time, so base
weights are never modified in place; :func:`merge` produces the equivalent
dense weight when one is needed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import torch
from torch import nn

from .errors import ConfigError, PlanError, ShapeError

SLOTS = ("Q", "K", "V", "FF1", "FF2")


class PlanMode(str, enum.Enum):
    SPATIAL_PATH = "SpatialPath"
    TAP = "TAP"
    FULL_TEMPORAL = "FullTemporal"
    CUSTOM = "Custom"


class LoraAdapter(nn.Module):
    """Trainable delta ``scale * B @ A`` for a ``d_out x d_in`` weight.

    ``B`` starts at zero so a fresh adapter is an exact no-op.
    """

    def __init__(self, d_in: int, d_out: int, rank: int = 4, scale: float = 1.0, generator=None, init_std=None):
        super().__init__()
        if rank < 1 or rank > min(d_in, d_out):
            raise ConfigError(f"rank {rank} outside [1, min({d_in}, {d_out})]")
        if scale < 0:
            raise ConfigError("adapter scale must be non-negative")
        std = init_std if init_std is not None else 1.0 / d_in**0.5
        self.A = nn.Parameter(torch.randn(rank, d_in, generator=generator) * std)
        self.B = nn.Parameter(torch.zeros(d_out, rank))
        self.rank = rank
        self.scale = float(scale)

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def delta(self) -> torch.Tensor:
        return self.scale * (self.B @ self.A)

    def extra_repr(self) -> str:
        return f"d_in={self.d_in}, d_out={self.d_out}, rank={self.rank}, scale={self.scale}"


def lora_apply(W: torch.Tensor, x: torch.Tensor, adapter: LoraAdapter | None = None, bias=None) -> torch.Tensor:
    """``W x + s B (A x)`` over the last axis of ``x``."""
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match weight {tuple(W.shape)}")
    out = torch.nn.functional.linear(x, W, bias)
    if adapter is None:
        return out
    if adapter.d_in != W.shape[1] or adapter.d_out != W.shape[0]:
        raise ShapeError(
            f"adapter {adapter.d_out}x{adapter.d_in} does not match weight {tuple(W.shape)}"
        )
    if adapter.scale == 0:
        return out
    return out + adapter.scale * ((x @ adapter.A.T) @ adapter.B.T)


def _check_dims(W: torch.Tensor, adapter: LoraAdapter) -> None:
    if tuple(W.shape) != (adapter.d_out, adapter.d_in):
        raise ShapeError(f"adapter {adapter.d_out}x{adapter.d_in} does not match weight {tuple(W.shape)}")


@torch.no_grad()
def merge(W: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    _check_dims(W, adapter)
    if adapter.scale == 0 or not torch.any(adapter.B):
        return W.clone()
    return W + adapter.delta().to(W.dtype)


@torch.no_grad()
def unmerge(W: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    _check_dims(W, adapter)
    if adapter.scale == 0 or not torch.any(adapter.B):
        return W.clone()
    return W - adapter.delta().to(W.dtype)


Key = tuple[str, str]


@dataclass
class InjectionPlan:
    """Adapters keyed by ``(block path, slot)`` with a mode tag."""

    mode: PlanMode
    entries: dict[Key, LoraAdapter] = field(default_factory=dict)

    def __post_init__(self):
        self.mode = PlanMode(self.mode)
        for path, slot in self.entries:
            if slot not in SLOTS:
                raise PlanError(f"unknown slot {slot!r} at {path!r}")
        if self.mode is PlanMode.TAP and any(
            not p.endswith(".temporal") or s != "K" for p, s in self.entries
        ):
            raise PlanError("TAP plans may only adapt temporal Key projections")
        if self.mode is PlanMode.SPATIAL_PATH and any(
            not p.endswith(".spatial") or s not in ("Q", "K", "V") for p, s in self.entries
        ):
            raise PlanError("SpatialPath plans may only adapt spatial self-attention")

    def get(self, path: str, slot: str) -> LoraAdapter | None:
        return self.entries.get((path, slot))

    def keys(self) -> list[Key]:
        return sorted(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Key]:
        return iter(self.keys())

    def parameters(self) -> Iterator[nn.Parameter]:
        for key in self.keys():
            yield from self.entries[key].parameters()

    def named_parameters(self) -> Iterator[tuple[str, nn.Parameter]]:
        for key in self.keys():
            for name, p in self.entries[key].named_parameters():
                yield f"{_flat(key)}.{name}", p

    def paths(self) -> set[Key]:
        return set(self.entries)

    def requires_grad_(self, flag: bool = True) -> "InjectionPlan":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def to(self, *args, **kwargs) -> "InjectionPlan":
        for a in self.entries.values():
            a.to(*args, **kwargs)
        return self

    def union(self, other: "InjectionPlan") -> "InjectionPlan":
        """Combine two plans that target disjoint slots (result is Custom)."""
        overlap = self.paths() & other.paths()
        if overlap:
            raise PlanError(f"plans overlap on {sorted(overlap)}")
        return InjectionPlan(PlanMode.CUSTOM, {**self.entries, **other.entries})

    def describe(self) -> dict:
        return {
            "mode": self.mode.value,
            "entries": [
                {"path": p, "slot": s, "rank": a.rank, "scale": a.scale, "d_in": a.d_in, "d_out": a.d_out}
                for (p, s), a in sorted(self.entries.items())
            ],
        }


def _flat(key: Key) -> str:
    return f"{key[0].replace('.', '_')}__{key[1]}"


def empty_plan() -> InjectionPlan:
    return InjectionPlan(PlanMode.CUSTOM, {})


# Table-1 style shorthands for temporal slot subsets.
PLAN_SLOTS = {
    "tap": ("K",),
    "k": ("K",),
    "q": ("Q",),
    "v": ("V",),
    "ff": ("FF1", "FF2"),
    "qk": ("Q", "K"),
    "full": ("Q", "K", "V", "FF1", "FF2"),
}


def make_plan(
    mode: PlanMode | str,
    rank: int,
    scale: float,
    model_config,
    slots: Iterable[str] | None = None,
    seed: int = 0,
    paths: Iterable[str] | None = None,
) -> InjectionPlan:
    """Build a fresh plan for a network described by ``model_config``.

    ``model_config`` must expose ``block_paths()`` and ``slot_shape(path, slot)``.
    Custom plans adapt ``slots`` on every temporal block unless ``paths`` names
    the blocks explicitly. ``seed`` drives the Gaussian init of every ``A``.
    """
    mode = PlanMode(mode)
    temporal = [p for p in model_config.block_paths() if p.endswith(".temporal")]
    spatial = [p for p in model_config.block_paths() if p.endswith(".spatial")]
    if mode is PlanMode.TAP:
        targets = [(p, "K") for p in temporal]
    elif mode is PlanMode.FULL_TEMPORAL:
        targets = [(p, s) for p in temporal for s in SLOTS]
    elif mode is PlanMode.SPATIAL_PATH:
        targets = [(p, s) for p in spatial for s in ("Q", "K", "V")]
    else:
        slots = tuple(slots or ())
        if not slots:
            raise PlanError("a custom plan needs at least one slot")
        bad = [s for s in slots if s not in SLOTS]
        if bad:
            raise PlanError(f"unknown slots {bad}")
        blocks = list(paths) if paths is not None else temporal
        targets = [(p, s) for p in blocks for s in slots]
    gen = torch.Generator().manual_seed(seed)
    entries = {}
    for path, slot in targets:
        d_out, d_in = model_config.slot_shape(path, slot)
        entries[(path, slot)] = LoraAdapter(d_in, d_out, rank, scale, generator=gen)
    return InjectionPlan(mode, entries)


def plan_for(name: str, rank: int, scale: float, model_config, seed: int = 0) -> InjectionPlan:
    """Plan from a short name: ``tap``, ``full``, ``q``, ``k``, ``v``, ``ff``, ``qk``."""
    name = name.lower()
    if name == "tap":
        return make_plan(PlanMode.TAP, rank, scale, model_config, seed=seed)
    if name == "full":
        return make_plan(PlanMode.FULL_TEMPORAL, rank, scale, model_config, seed=seed)
    if name not in PLAN_SLOTS:
        raise PlanError(f"unknown plan name {name!r}")
    return make_plan(PlanMode.CUSTOM, rank, scale, model_config, slots=PLAN_SLOTS[name], seed=seed)
