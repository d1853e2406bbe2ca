"""Seeded synthetic analogues of four natural image corruptions.

Each generator takes a single ``strength`` scalar.  The random geometry of
a corruption (line endpoints, cell size, noise field, drop centres) is
drawn from a generator keyed on ``(seed, kind, image index)`` and does not
depend on the strength, so increasing the strength only increases its
magnitude.  Outputs are clamped to ``[0, 1]``; labels are untouched.

These are approximations of the corruption *semantics* (occluding
strokes, periodic masking, fractal noise, local refraction); they are not
pixel-compatible with any published benchmark.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .data import Dataset
from .exceptions import ConfigError

KINDS = ("lines", "checkerboard", "plasma", "waterdrop")
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}

# strengths used for the four corrupted evaluation sets
REFERENCE_STRENGTHS = {"plasma": 4.0, "checkerboard": 4.0, "waterdrop": 7.0, "lines": 1.6}

MAX_LINES = 24


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    strength: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown corruption {self.kind!r}; expected one of {KINDS}")
        if not self.strength >= 0:
            raise ConfigError(f"corruption strength must be >= 0, got {self.strength}")

    @classmethod
    def parse(cls, text):
        """Parse ``kind=lines,strength=1.6,seed=3`` (or a bare kind name)."""
        fields = {}
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "=" not in part:
                fields.setdefault("kind", part)
                continue
            key, value = part.split("=", 1)
            fields[key.strip()] = value.strip()
        if "kind" not in fields:
            raise ConfigError(f"corruption spec {text!r} has no kind")
        kind = fields.pop("kind")
        strength = float(fields.pop("strength", REFERENCE_STRENGTHS.get(kind, 1.0)))
        seed = int(fields.pop("seed", 0))
        if fields:
            raise ConfigError(f"unknown corruption fields {sorted(fields)}")
        return cls(kind, strength, seed)

    def to_text(self):
        return f"kind={self.kind},strength={self.strength:g},seed={self.seed}"


def _segment_distance(yy, xx, p0, p1):
    d = p1 - p0
    L2 = max(float(d @ d), 1e-12)
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / L2, 0.0, 1.0)
    return np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))


def _lines(img, s, rng):
    c, h, w = img.shape
    n_lines = min(MAX_LINES, int(np.ceil(3.0 * s)))
    ends = rng.uniform(0, [h, w, h, w], size=(MAX_LINES, 4))
    widths = rng.uniform(0.8, 1.6, size=MAX_LINES)
    colors = rng.uniform(0.0, 1.0, size=(MAX_LINES, c))
    opacity = min(1.0, 0.5 * s)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = img.copy()
    for k in range(n_lines):
        dist = _segment_distance(yy, xx, ends[k, :2], ends[k, 2:])
        cover = opacity * np.clip(widths[k] + 0.5 - dist, 0.0, 1.0)
        out = out * (1 - cover) + colors[k][:, None, None] * cover
    return out


def _checkerboard(img, s, rng):
    _, h, w = img.shape
    cell = int(rng.integers(3, 7))
    oy, ox = rng.integers(0, cell, size=2)
    yy, xx = np.mgrid[0:h, 0:w]
    board = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
    contrast = 1.0 - np.exp(-0.6 * s)
    return img * (1.0 - contrast * board)[None]


def diamond_square(n_levels, rng, roughness=0.6):
    """Fractal height field of side ``2**n_levels + 1``, scaled to [-1, 1]."""
    size = 2**n_levels + 1
    f = np.zeros((size, size))
    f[:: size - 1, :: size - 1] = rng.uniform(-1, 1, size=(2, 2))
    step, amp = size - 1, 1.0
    while step > 1:
        half = step // 2
        # diamond step: centres of squares
        centres = (
            f[0:-1:step, 0:-1:step] + f[0:-1:step, step::step] + f[step::step, 0:-1:step] + f[step::step, step::step]
        ) / 4.0
        f[half::step, half::step] = centres + amp * rng.uniform(-1, 1, size=centres.shape)
        # square step: edge midpoints
        for y0, x0 in ((0, half), (half, 0)):
            ys, xs = np.arange(y0, size, step), np.arange(x0, size, step)
            Y, X = np.meshgrid(ys, xs, indexing="ij")
            acc = np.zeros(Y.shape)
            cnt = np.zeros(Y.shape)
            for dy, dx in ((-half, 0), (half, 0), (0, -half), (0, half)):
                yy, xx = Y + dy, X + dx
                ok = (yy >= 0) & (yy < size) & (xx >= 0) & (xx < size)
                acc[ok] += f[yy[ok], xx[ok]]
                cnt[ok] += 1
            f[Y, X] = acc / cnt + amp * rng.uniform(-1, 1, size=Y.shape)
        step, amp = half, amp * roughness
    f -= f.mean()
    return f / max(np.abs(f).max(), 1e-12)


def _plasma(img, s, rng):
    c, h, w = img.shape
    levels = int(np.ceil(np.log2(max(h, w) - 1))) if max(h, w) > 2 else 1
    field = diamond_square(levels, rng)[:h, :w]
    tint = rng.uniform(0.6, 1.0, size=c)
    return img + 0.13 * s * field[None] * tint[:, None, None]


def _waterdrop(img, s, rng):
    c, h, w = img.shape
    n_drops = 4
    centres = rng.uniform(0, [h, w], size=(n_drops, 2))
    radii = rng.uniform(0.2, 0.35, size=n_drops) * min(h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sy, sx = yy.copy(), xx.copy()
    for (cy, cx), r in zip(centres, radii):
        dy, dx = yy - cy, xx - cx
        rho = np.hypot(dy, dx)
        inside = rho < r
        # lens-like pull towards the centre, strongest mid-radius, zero at the rim
        fall = np.where(inside, np.sin(np.pi * rho / r), 0.0)
        scale = 0.45 * s * fall / np.maximum(rho, 1e-9)
        sy -= scale * dy
        sx -= scale * dx
    return np.stack([map_coordinates(img[ch], [sy, sx], order=1, mode="reflect") for ch in range(c)])


_GENERATORS = {"lines": _lines, "checkerboard": _checkerboard, "plasma": _plasma, "waterdrop": _waterdrop}


def corrupt_images(images, spec):
    images = np.asarray(images, dtype=np.float64)
    if spec.strength == 0:
        return images.copy()
    gen = _GENERATORS[spec.kind]
    out = np.empty_like(images)
    for i, img in enumerate(images):
        rng = np.random.default_rng([spec.seed, _KIND_CODE[spec.kind], i])
        out[i] = gen(img, spec.strength, rng)
    return np.clip(out, 0.0, 1.0)


def corrupt(dataset, spec):
    if isinstance(spec, str):
        spec = CorruptionSpec.parse(spec)
    return Dataset(
        corrupt_images(dataset.images, spec),
        dataset.labels.copy(),
        dataset.n_classes,
        f"{dataset.split}+{spec.kind}",
        dataset.seed,
    )
