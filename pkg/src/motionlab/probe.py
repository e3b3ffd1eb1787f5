"""Analyses and metrics: hidden-state similarity, motion probes and the evaluation suite.

Motion is read from frame differences: the absolute temporal difference is
pooled on a coarse grid, normalised by its overall level, and summarised by
per-cell statistics plus the trajectory of its energy centroid. The same
features apply to rendered clips and to decoder hidden states.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from .errors import ConfigError, ShapeError
from .net import HiddenStateTrace
from .synthvid import (
    MOTIONS,
    SHAPES,
    AppearanceSpec,
    ArtifactSpec,
    ClipSpec,
    Motion,
    VideoClip,
    detect_artifact,
    random_appearance,
    render_clip,
)

GRID = 4


# ---------------------------------------------------------------------------
# similarity


@dataclass
class SimilarityProfile:
    values: dict[tuple[int, int], float] = field(default_factory=dict)

    def levels(self) -> list[int]:
        return sorted({k[0] for k in self.values})

    def steps(self) -> list[int]:
        return sorted({k[1] for k in self.values})

    def mean(self) -> float:
        return float(np.mean(list(self.values.values())))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "step", "cosine"])
            for (lvl, step), v in sorted(self.values.items()):
                w.writerow([lvl, step, f"{v:.8f}"])


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_profile(trace_a: HiddenStateTrace, trace_b: HiddenStateTrace) -> SimilarityProfile:
    """Cosine of flattened hidden states per ``(level, step)``, averaged over the batch."""
    if set(trace_a.states) != set(trace_b.states):
        raise ConfigError("traces are not aligned on (level, step) keys")
    out = {}
    for key in trace_a.keys():
        a = np.asarray(trace_a.states[key], dtype=np.float64)
        b = np.asarray(trace_b.states[key], dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeError(f"trace shapes differ at {key}: {a.shape} vs {b.shape}")
        a = a.reshape(a.shape[0], -1)
        b = b.reshape(b.shape[0], -1)
        out[key] = float(np.mean([_cosine(x, y) for x, y in zip(a, b)]))
    return SimilarityProfile(out)


# ---------------------------------------------------------------------------
# motion features


def motion_features(x, grid: int = GRID) -> np.ndarray:
    """Frame-difference statistics for a clip or any ``f x h x w x c`` array.

    Invariant to adding a constant to every value; all zeros for a static input.
    """
    data = x.data if isinstance(x, VideoClip) else np.asarray(x)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 3:
        data = data[..., None]
    if data.ndim != 4:
        raise ShapeError(f"expected f x h x w x c, got {data.shape}")
    f, h, w, _ = data.shape
    if f < 2:
        raise ConfigError("motion features need at least two frames")
    g = min(grid, h, w)
    energy = np.abs(np.diff(data, axis=0)).mean(axis=-1)  # (f-1, h, w)
    rb = np.linspace(0, h, g + 1).astype(int)
    cb = np.linspace(0, w, g + 1).astype(int)
    cells = np.stack(
        [
            np.stack([energy[:, rb[i] : rb[i + 1], cb[j] : cb[j + 1]].mean(axis=(1, 2)) for j in range(g)], axis=1)
            for i in range(g)
        ],
        axis=1,
    )  # (f-1, g, g)
    level = cells.mean()
    if level <= 1e-12:
        n = 2 * g * g + 3 * (f - 1)
        return np.zeros(n)
    cells = cells / level
    per_pair = cells.mean(axis=(1, 2))
    rows = (np.arange(h) + 0.5) / h * 2 - 1
    cols = (np.arange(w) + 0.5) / w * 2 - 1
    mass = energy.sum(axis=(1, 2))
    safe = np.where(mass > 1e-12, mass, 1.0)
    cy = np.where(mass > 1e-12, (energy.sum(axis=2) * rows).sum(axis=1) / safe, 0.0)
    cx = np.where(mass > 1e-12, (energy.sum(axis=1) * cols).sum(axis=1) / safe, 0.0)
    return np.concatenate(
        [cells.mean(axis=0).ravel(), cells.std(axis=0).ravel(), cy, cx, per_pair]
    )


# ---------------------------------------------------------------------------
# linear probes


@dataclass
class LinearProbe:
    scaler: StandardScaler
    model: LogisticRegression

    @property
    def classes(self) -> np.ndarray:
        return self.model.classes_

    def predict_proba(self, features) -> np.ndarray:
        return self.model.predict_proba(self.scaler.transform(np.atleast_2d(features)))

    def predict(self, features) -> np.ndarray:
        return self.classes[self.predict_proba(features).argmax(axis=1)]


def _fit(x, y, c: float = 1.0) -> LinearProbe:
    x = np.asarray(x, dtype=np.float64)
    scaler = StandardScaler().fit(x)
    model = LogisticRegression(C=c, max_iter=5000).fit(scaler.transform(x), y)
    return LinearProbe(scaler, model)


def fit_probe(pos_features, neg_features, c: float = 1.0) -> LinearProbe:
    """Binary logistic probe: class 1 for ``pos_features``, class 0 for ``neg_features``."""
    pos = np.atleast_2d(np.asarray(pos_features, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(neg_features, dtype=np.float64))
    if len(pos) == 0 or len(neg) == 0:
        raise ConfigError("a probe needs samples from both classes")
    if len(pos) < 8 or len(neg) < 8:
        raise ConfigError("a probe needs at least 8 samples per class")
    x = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(len(pos), int), np.zeros(len(neg), int)])
    return _fit(x, y, c)


def probe_eval(probe: LinearProbe, features) -> tuple[np.ndarray, np.ndarray]:
    """Predicted labels and the sigmoid-margin confidence of each prediction."""
    p = probe.predict_proba(features)
    idx = p.argmax(axis=1)
    return probe.classes[idx], p[np.arange(len(idx)), idx]


# ---------------------------------------------------------------------------
# judges trained on rendered clips


def _judge_clips(n_per_class: int, seed: int, frames: int, height: int, width: int, noise: float):
    rng = np.random.default_rng(seed)
    clips, labels = [], []
    for motion in MOTIONS:
        for _ in range(n_per_class):
            spec = ClipSpec(
                motion=motion,
                appearance=random_appearance(rng),
                frames=frames,
                height=height,
                width=width,
                seed=int(rng.integers(2**63)),
                offset=tuple(rng.uniform(-1.0, 1.0, size=2)),
                noise=float(rng.uniform(0.0, noise)),
            )
            clips.append(render_clip(spec))
            labels.append(motion.value)
    return clips, labels


def train_motion_judge(
    n_per_class: int = 60, seed: int = 0, frames: int = 8, height: int = 16, width: int = 16, noise: float = 0.08
) -> LinearProbe:
    """Multiclass motion classifier fitted on rendered clips (with pixel-noise augmentation)."""
    clips, labels = _judge_clips(n_per_class, seed, frames, height, width, noise)
    return _fit([motion_features(c) for c in clips], labels, c=0.5)


def judge_accuracy(judge: LinearProbe, n_per_class: int = 20, seed: int = 1, **kw) -> float:
    clips, labels = _judge_clips(n_per_class, seed, kw.get("frames", 8), kw.get("height", 16), kw.get("width", 16), 0.0)
    pred = judge.predict([motion_features(c) for c in clips])
    return float(np.mean(pred == np.asarray(labels)))


def _foreground(frame: np.ndarray, area: int):
    """Background colour, foreground colour and a soft foreground mask for one frame."""
    flat = frame.reshape(-1, 3)
    bg = np.median(flat, axis=0)
    dist = np.linalg.norm(flat - bg, axis=1)
    top = np.argsort(-dist, kind="stable")[:area]
    fg = flat[top].mean(axis=0)
    d = fg - bg
    denom = d @ d
    if denom < 1e-8:
        return bg, fg, np.zeros(frame.shape[:2])
    proj = ((flat - bg) @ d) / denom
    # soft threshold suppresses low-level background noise
    mask = np.clip(2.0 * proj - 0.5, 0.0, 1.0).reshape(frame.shape[:2])
    return bg, fg, mask


def _expected_area(h: int, w: int) -> int:
    from .synthvid import object_radius

    return max(1, int(round(np.pi * object_radius(h, w) ** 2 * 0.6)))


def shape_features(clip: VideoClip) -> np.ndarray:
    """Scale-normalised central moments of the soft foreground mask, averaged over frames."""
    _, h, w, _ = clip.data.shape
    area = _expected_area(h, w)
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    feats = []
    for frame in np.asarray(clip.data, dtype=np.float64):
        _, _, m = _foreground(frame, area)
        mass = m.sum()
        if mass < 1e-6:
            feats.append(np.zeros(9))
            continue
        cy, cx = (m * ys).sum() / mass, (m * xs).sum() / mass
        dy, dx = ys - cy, xs - cx
        row = []
        for p, q in ((2, 0), (0, 2), (1, 1), (3, 0), (0, 3), (2, 1), (1, 2), (4, 0), (2, 2)):
            mu = (m * dy**p * dx**q).sum()
            row.append(mu / mass ** (1 + (p + q) / 2))
        feats.append(np.array(row))
    return np.mean(feats, axis=0)


def train_shape_detector(
    n_per_class: int = 60,
    seed: int = 2,
    frames: int = 8,
    height: int = 16,
    width: int = 16,
    noise: float = 0.05,
    c: float = 20.0,
) -> LinearProbe:
    rng = np.random.default_rng(seed)
    x, y = [], []
    for shape in SHAPES:
        for _ in range(n_per_class):
            app = random_appearance(rng)
            app = AppearanceSpec(shape, app.fg_color, app.bg_color)
            spec = ClipSpec(
                motion=MOTIONS[rng.integers(len(MOTIONS))],
                appearance=app,
                frames=frames,
                height=height,
                width=width,
                seed=int(rng.integers(2**63)),
                offset=tuple(rng.uniform(-1.0, 1.0, size=2)),
                noise=float(rng.uniform(0.0, noise)),
            )
            x.append(shape_features(render_clip(spec)))
            y.append(shape.value)
    return _fit(x, y, c=c)


# ---------------------------------------------------------------------------
# metric suite


@dataclass
class Judges:
    motion: LinearProbe
    shape: LinearProbe

    @classmethod
    def train(cls, seed: int = 0, frames: int = 8, height: int = 16, width: int = 16) -> "Judges":
        kw = dict(frames=frames, height=height, width=width)
        return cls(train_motion_judge(seed=seed, **kw), train_shape_detector(seed=seed + 1, **kw))


@dataclass
class MetricsReport:
    motion_acc: float
    app_align: float
    app_leak: float
    temporal_consist: float
    breakdown: list[dict] = field(default_factory=list)
    variant: str = ""

    METRICS = ("motion_acc", "app_align", "app_leak", "temporal_consist")

    def __post_init__(self):
        for name in self.METRICS:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")

    def as_dict(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in self.METRICS}


def color_alignment(clip: VideoClip, target_fg) -> float:
    """1 minus the distance between the estimated and target foreground colour (clamped)."""
    _, h, w, _ = clip.data.shape
    area = _expected_area(h, w)
    est = np.mean([_foreground(f, area)[1] for f in np.asarray(clip.data, dtype=np.float64)], axis=0)
    return float(np.clip(1.0 - np.linalg.norm(est - np.asarray(target_fg)), 0.0, 1.0))


def temporal_consistency(clip: VideoClip) -> float:
    frames = np.asarray(clip.data, dtype=np.float64).reshape(clip.frames, -1)
    return float(np.clip(np.mean([_cosine(a, b) for a, b in zip(frames[:-1], frames[1:])]), 0.0, 1.0))


def metric_suite(
    clips: Sequence[VideoClip],
    targets: AppearanceSpec | Sequence[AppearanceSpec],
    artifact: ArtifactSpec | None,
    motion: Motion | str,
    judges: Judges,
    variant: str = "",
    need_leak: bool = True,
) -> MetricsReport:
    """Motion accuracy, appearance alignment, artifact leakage and temporal consistency."""
    if not clips:
        raise ConfigError("metric_suite needs at least one clip")
    if artifact is None and need_leak:
        raise ConfigError("the leakage metric needs the reference-set artifact")
    if isinstance(targets, AppearanceSpec):
        targets = [targets] * len(clips)
    if len(targets) != len(clips):
        raise ConfigError("one target appearance per clip is required")
    motion = Motion(motion)
    feats = np.array([motion_features(c) for c in clips])
    mprob = judges.motion.predict_proba(feats)
    midx = list(judges.motion.classes).index(motion.value)
    sprob = judges.shape.predict_proba(np.array([shape_features(c) for c in clips]))
    sclasses = list(judges.shape.classes)
    rows = []
    for i, (clip, tgt) in enumerate(zip(clips, targets)):
        shape_p = float(sprob[i, sclasses.index(tgt.shape.value)])
        color = color_alignment(clip, tgt.fg_color)
        rows.append(
            {
                "motion_pred": str(judges.motion.classes[int(mprob[i].argmax())]),
                "motion_correct": float(mprob[i].argmax() == midx),
                "motion_prob": float(mprob[i, midx]),
                "color_align": color,
                "shape_prob": shape_p,
                "app_align": 0.5 * color + 0.5 * shape_p,
                "app_leak": detect_artifact(clip, artifact) if artifact is not None else 0.0,
                "temporal_consist": temporal_consistency(clip),
            }
        )
    return MetricsReport(
        motion_acc=float(np.mean([r["motion_correct"] for r in rows])),
        app_align=float(np.mean([r["app_align"] for r in rows])),
        app_leak=float(np.mean([r["app_leak"] for r in rows])),
        temporal_consist=float(np.mean([r["temporal_consist"] for r in rows])),
        breakdown=rows,
        variant=variant,
    )


def write_reports_csv(path, reports: Sequence[MetricsReport], hashes: dict[str, str] | None = None) -> None:
    """One row per variant x metric."""
    hashes = hashes or {}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "metric", "value", "config_hash"])
        for r in reports:
            for m, v in r.as_dict().items():
                w.writerow([r.variant, m, f"{v:.6f}", hashes.get(r.variant, "")])


def summary_text(reports: Sequence[MetricsReport]) -> str:
    head = f"{'variant':<24}" + "".join(f"{m:>18}" for m in MetricsReport.METRICS)
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(f"{r.variant:<24}" + "".join(f"{getattr(r, m):>18.4f}" for m in MetricsReport.METRICS))
    return "\n".join(lines) + "\n"
