"""Synthetic labelled video clips with closed-form motion and a planted artifact.

Every clip is a pure function of its :class:`ClipSpec`: one foreground shape on
a flat background, moving along an analytic trajectory, optionally with a small
high-contrast patch composited at a fixed position in every frame. The patch
stands in for a reference-video background element that an adapted model might
reproduce when it should not.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError


class Motion(str, enum.Enum):
    BOUNCE = "bounce"
    ORBIT = "orbit"
    ZIGZAG = "zigzag"
    GROW_SHRINK = "grow-shrink"
    SLIDE = "slide"


class Shape(str, enum.Enum):
    CIRCLE = "circle"
    SQUARE = "square"
    TRIANGLE = "triangle"


MOTIONS: tuple[Motion, ...] = tuple(Motion)
SHAPES: tuple[Shape, ...] = tuple(Shape)

# Foreground colours are bright, backgrounds dark, so the object always has contrast.
FG_PALETTE = np.array(
    [
        [0.95, 0.20, 0.15],
        [0.15, 0.85, 0.25],
        [0.20, 0.40, 0.95],
        [0.95, 0.85, 0.15],
        [0.90, 0.25, 0.85],
        [0.20, 0.90, 0.90],
    ],
    dtype=np.float64,
)
BG_PALETTE = np.array(
    [
        [0.05, 0.05, 0.05],
        [0.10, 0.10, 0.30],
        [0.25, 0.08, 0.08],
        [0.08, 0.22, 0.10],
    ],
    dtype=np.float64,
)

_SUPERSAMPLE = 4


def color_bin(rgb, palette: np.ndarray) -> int:
    """Index of the palette entry nearest to ``rgb``."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return int(np.argmin(((palette - rgb) ** 2).sum(axis=1)))


def checker_template(size: int = 6, block: int = 2) -> np.ndarray:
    """Checkerboard of ``block`` x ``block`` cells.

    The default uses 2-pixel cells: 1-pixel patterns correlate with the period-2
    texture of patch decoders, and single bars correlate with object edges.
    """
    i, j = np.indices((size, size))
    return (((i // block) + (j // block)) % 2).astype(np.float64)


def stripe_template(size: int = 4, width: int = 1) -> np.ndarray:
    """Vertical bars ``width`` pixels wide."""
    return np.tile(((np.arange(size) // width) % 2).astype(np.float64), (size, 1))


@dataclass(frozen=True, eq=False)
class ArtifactSpec:
    template: np.ndarray = field(default_factory=checker_template)
    position: tuple[int, int] = (0, 0)
    contrast: float = 0.9

    def __post_init__(self):
        t = np.asarray(self.template, dtype=np.float64)
        if t.ndim != 2:
            raise ConfigError("artifact template must be a 2-D grayscale patch")
        if not np.all(np.isfinite(t)) or t.std() == 0:
            raise ConfigError("artifact template must be finite with nonzero variance")
        if not 0 < self.contrast <= 1:
            raise ConfigError(f"artifact contrast must lie in (0, 1], got {self.contrast}")
        object.__setattr__(self, "template", t)

    def check_fits(self, height: int, width: int) -> None:
        r, c = self.position
        th, tw = self.template.shape
        if r < 0 or c < 0 or r + th > height or c + tw > width:
            raise ConfigError(
                f"artifact {th}x{tw} at {self.position} does not fit a {height}x{width} frame"
            )


@dataclass(frozen=True, eq=False)
class AppearanceSpec:
    shape: Shape = Shape.CIRCLE
    fg_color: tuple[float, float, float] = tuple(FG_PALETTE[0])
    bg_color: tuple[float, float, float] = tuple(BG_PALETTE[0])
    artifact: ArtifactSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "shape", Shape(self.shape))
        for name in ("fg_color", "bg_color"):
            col = tuple(float(v) for v in getattr(self, name))
            if len(col) != 3 or not all(0.0 <= v <= 1.0 for v in col):
                raise ConfigError(f"{name} must be 3 channels in [0, 1], got {col}")
            object.__setattr__(self, name, col)

    @property
    def fg_bin(self) -> int:
        return color_bin(self.fg_color, FG_PALETTE)

    @property
    def bg_bin(self) -> int:
        return color_bin(self.bg_color, BG_PALETTE)


@dataclass(frozen=True, eq=False)
class ClipSpec:
    """Everything needed to render one clip.

    ``speed`` scales the motion amplitude (0 gives a static object); ``offset``
    shifts the whole trajectory in pixels; ``noise`` adds seeded per-pixel
    Gaussian noise of that standard deviation.
    """

    motion: Motion = Motion.SLIDE
    appearance: AppearanceSpec = field(default_factory=AppearanceSpec)
    frames: int = 8
    height: int = 16
    width: int = 16
    seed: int = 0
    speed: float = 1.0
    offset: tuple[float, float] = (0.0, 0.0)
    noise: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "motion", Motion(self.motion))
        if self.frames < 2:
            raise ConfigError(f"a clip needs at least 2 frames, got {self.frames}")
        if self.height < 8 or self.width < 8:
            raise ConfigError(f"frames must be at least 8x8, got {self.height}x{self.width}")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if self.appearance.artifact is not None:
            self.appearance.artifact.check_fits(self.height, self.width)


@dataclass(eq=False)
class VideoClip:
    data: np.ndarray
    spec: ClipSpec | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise ConfigError(f"clip data must be f x h x w x 3, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ConfigError("clip data must be finite")

    @property
    def frames(self) -> int:
        return self.data.shape[0]


def object_radius(height: int, width: int) -> float:
    return 0.15 * min(height, width)


def motion_amplitude(height: int, width: int) -> float:
    r = object_radius(height, width)
    return 0.5 * min(height, width) - 1.6 * r - 0.5


def triangle_wave(x):
    """Period-1 triangle wave: 0 at integers, 1 at half-integers."""
    x = np.asarray(x, dtype=np.float64)
    return 1.0 - np.abs(2.0 * (x - np.floor(x)) - 1.0)


def trajectory(spec: ClipSpec) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form object path: centres ``(f, 2)`` as (row, col) and radii ``(f,)``."""
    f, h, w = spec.frames, spec.height, spec.width
    i = np.arange(f, dtype=np.float64)
    s = i / (f - 1)
    phase = 2.0 * np.pi * i / f
    amp = spec.speed * motion_amplitude(h, w)
    r0 = object_radius(h, w)
    row = np.full(f, h / 2.0)
    col = np.full(f, w / 2.0)
    radius = np.full(f, r0)
    m = spec.motion
    if m is Motion.SLIDE:
        col = col + amp * (2.0 * s - 1.0)
    elif m is Motion.BOUNCE:
        row = row + amp * (2.0 * triangle_wave(s) - 1.0)
    elif m is Motion.ZIGZAG:
        col = col + amp * (2.0 * s - 1.0)
        row = row + 0.5 * amp * (2.0 * triangle_wave(2.0 * s) - 1.0)
    elif m is Motion.ORBIT:
        row = row + amp * np.sin(phase)
        col = col + amp * np.cos(phase)
    elif m is Motion.GROW_SHRINK:
        radius = r0 * (1.0 + 0.45 * spec.speed * np.sin(phase))
    centers = np.stack([row + spec.offset[0], col + spec.offset[1]], axis=1)
    return centers, radius


def _coverage(shape: Shape, center, radius: float, height: int, width: int) -> np.ndarray:
    n = _SUPERSAMPLE
    sub = (np.arange(n) + 0.5) / n
    ys = (np.arange(height)[:, None] + sub[None, :]).reshape(-1)
    xs = (np.arange(width)[:, None] + sub[None, :]).reshape(-1)
    dy = ys[:, None] - center[0]
    dx = xs[None, :] - center[1]
    if shape is Shape.CIRCLE:
        inside = dy**2 + dx**2 <= radius**2
    elif shape is Shape.SQUARE:
        half = radius * np.sqrt(np.pi) / 2.0
        inside = np.maximum(np.abs(dy), np.abs(dx)) <= half
    else:
        # equilateral, apex up, centroid at the centre, same area as the circle
        circ = radius * np.sqrt(4.0 * np.pi / (3.0 * np.sqrt(3.0)))
        inside = np.broadcast_to(dy <= circ / 2.0, (ys.size, xs.size)).copy()
        for ang in (np.pi / 6.0, 5.0 * np.pi / 6.0):
            # upper-left and upper-right edge normals; every edge sits at the inradius
            ny, nx = -np.sin(ang), np.cos(ang)
            inside &= dy * ny + dx * nx <= circ / 2.0
    inside = inside.astype(np.float64)
    return inside.reshape(height, n, width, n).mean(axis=(1, 3))


def render_clip(spec: ClipSpec) -> VideoClip:
    """Render ``spec`` into a ``frames x height x width x 3`` clip in [0, 1]."""
    app = spec.appearance
    h, w = spec.height, spec.width
    centers, radii = trajectory(spec)
    fg = np.asarray(app.fg_color)
    bg = np.asarray(app.bg_color)
    background = np.broadcast_to(bg, (h, w, 3)).copy()
    art = app.artifact
    if art is not None:
        r, c = art.position
        th, tw = art.template.shape
        patch = background[r : r + th, c : c + tw]
        background[r : r + th, c : c + tw] = (1.0 - art.contrast) * patch + art.contrast * art.template[
            ..., None
        ]
    frames = np.empty((spec.frames, h, w, 3))
    for k in range(spec.frames):
        cov = _coverage(app.shape, centers[k], radii[k], h, w)[..., None]
        frames[k] = background * (1.0 - cov) + fg * cov
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        frames = frames + spec.noise * rng.standard_normal(frames.shape)
    return VideoClip(np.clip(frames, 0.0, 1.0), spec)


def foreground_centroids(clip: VideoClip, appearance: AppearanceSpec) -> np.ndarray:
    """Per-frame (row, col) centroid of foreground coverage recovered from pixels."""
    fg = np.asarray(appearance.fg_color)
    bg = np.asarray(appearance.bg_color)
    d = fg - bg
    cov = np.clip(((clip.data - bg) @ d) / (d @ d), 0.0, 1.0)
    rows = np.arange(cov.shape[1]) + 0.5
    cols = np.arange(cov.shape[2]) + 0.5
    mass = cov.sum(axis=(1, 2))
    return np.stack(
        [(cov.sum(axis=2) * rows).sum(axis=1) / mass, (cov.sum(axis=1) * cols).sum(axis=1) / mass],
        axis=1,
    )


def random_appearance(rng: np.random.Generator, artifact: ArtifactSpec | None = None) -> AppearanceSpec:
    return AppearanceSpec(
        shape=SHAPES[rng.integers(len(SHAPES))],
        fg_color=tuple(FG_PALETTE[rng.integers(len(FG_PALETTE))]),
        bg_color=tuple(BG_PALETTE[rng.integers(len(BG_PALETTE))]),
        artifact=artifact,
    )


def all_appearances() -> list[tuple[Shape, int, int]]:
    return list(itertools.product(SHAPES, range(len(FG_PALETTE)), range(len(BG_PALETTE))))


def build_reference_set(
    motion: Motion | str,
    k: int,
    artifact: ArtifactSpec | None,
    seed: int,
    *,
    frames: int = 8,
    height: int = 16,
    width: int = 16,
    exclude: set | None = None,
) -> list[VideoClip]:
    """``k`` clips of one motion with distinct random appearances and a shared artifact.

    ``exclude`` holds ``(shape, fg_bin, bg_bin)`` triples that must not be drawn,
    e.g. the evaluation appearances.
    """
    if k < 1:
        raise ConfigError("a reference set needs k >= 1")
    rng = np.random.default_rng(seed)
    pool = [a for a in all_appearances() if not exclude or a not in exclude]
    picks = rng.choice(len(pool), size=k, replace=False)
    clips = []
    for idx in picks:
        shape, fg, bg = pool[idx]
        app = AppearanceSpec(shape, tuple(FG_PALETTE[fg]), tuple(BG_PALETTE[bg]), artifact)
        spec = ClipSpec(
            motion=motion,
            appearance=app,
            frames=frames,
            height=height,
            width=width,
            seed=int(rng.integers(2**63)),
            offset=tuple(rng.uniform(-1.0, 1.0, size=2)),
        )
        clips.append(render_clip(spec))
    return clips


def build_corpus(
    n: int,
    seed: int,
    *,
    exclude_motion: Motion | str | None = None,
    rare_motion: Motion | str | None = None,
    rare_share: float = 0.05,
    frames: int = 8,
    height: int = 16,
    width: int = 16,
) -> list[VideoClip]:
    """Pretraining corpus over every motion except ``exclude_motion``.

    Motions, shapes and colours are cycled so that each label appears whenever
    ``n`` is at least the vocabulary size; the pairing between them is shuffled.
    ``rare_motion`` gets only ``round(rare_share * n)`` clips (at least one) and
    the remaining clips are balanced over the other motions.
    """
    if n < 1:
        raise ConfigError("corpus size must be positive")
    motions = [m for m in MOTIONS if exclude_motion is None or m is not Motion(exclude_motion)]
    rng = np.random.default_rng(seed)

    def cycled(size, count=n):
        reps = np.resize(np.arange(size), count)
        return reps[rng.permutation(count)]

    if rare_motion is not None:
        rare = Motion(rare_motion)
        if rare not in motions:
            raise ConfigError(f"rare motion {rare.value} is excluded from the corpus")
        if not 0.0 <= rare_share < 1.0:
            raise ConfigError(f"rare_share must lie in [0, 1), got {rare_share}")
        k = max(1, int(round(rare_share * n)))
        others = [m for m in motions if m is not rare]
        ids = np.concatenate([np.full(k, len(others)), cycled(len(others), n - k)])
        motions = others + [rare]
        m_idx = ids[rng.permutation(n)]
    else:
        m_idx = cycled(len(motions))
    s_idx, f_idx, b_idx = (cycled(len(x)) for x in (SHAPES, FG_PALETTE, BG_PALETTE))
    clips = []
    for i in range(n):
        app = AppearanceSpec(SHAPES[s_idx[i]], tuple(FG_PALETTE[f_idx[i]]), tuple(BG_PALETTE[b_idx[i]]))
        spec = ClipSpec(
            motion=motions[m_idx[i]],
            appearance=app,
            frames=frames,
            height=height,
            width=width,
            seed=int(rng.integers(2**63)),
            offset=tuple(rng.uniform(-1.0, 1.0, size=2)),
        )
        clips.append(render_clip(spec))
    return clips


def detect_artifact(clip: VideoClip, artifact: ArtifactSpec, search: int = 1) -> float:
    """Best normalised cross-correlation of the template near its planted position.

    The maximum runs over every frame and every offset within ``search`` pixels;
    windows with zero variance score 0.
    """
    gray = np.asarray(clip.data, dtype=np.float64).mean(axis=-1)
    _, h, w = gray.shape
    tmpl = artifact.template - artifact.template.mean()
    tnorm = np.sqrt((tmpl**2).sum())
    th, tw = tmpl.shape
    r0, c0 = artifact.position
    best = 0.0
    for dr in range(-search, search + 1):
        for dc in range(-search, search + 1):
            r, c = r0 + dr, c0 + dc
            if r < 0 or c < 0 or r + th > h or c + tw > w:
                continue
            win = gray[:, r : r + th, c : c + tw]
            win = win - win.mean(axis=(1, 2), keepdims=True)
            wnorm = np.sqrt((win**2).sum(axis=(1, 2)))
            num = (win * tmpl).sum(axis=(1, 2))
            ok = wnorm > 1e-9
            if ok.any():
                best = max(best, float((num[ok] / (wnorm[ok] * tnorm)).max()))
    return float(np.clip(best, 0.0, 1.0))


def with_artifact(spec: ClipSpec, artifact: ArtifactSpec | None) -> ClipSpec:
    return replace(spec, appearance=replace(spec.appearance, artifact=artifact))
