"""Procedural desk-scale image benchmarks.

Each class is a small stroke glyph with a distinct canonical orientation
(none is a quarter-turn of another), rendered with random position/scale/
tilt jitter, random foreground/background colors, a low-contrast distractor
tick, and pixel noise.  Shape carries the class; color is a nuisance
factor.  This makes rotation prediction and augmentation-invariant
embeddings genuinely informative about shape.
"""

from __future__ import annotations

import numpy as np

from .data import ImageDataset

# glyphs as segment lists in unit coordinates, y growing downwards
GLYPHS10 = (
    ("tee", (((0.15, 0.18), (0.85, 0.18)), ((0.50, 0.18), (0.50, 0.85)))),
    ("ell", (((0.25, 0.15), (0.25, 0.82)), ((0.25, 0.82), (0.82, 0.82)))),
    ("seven", (((0.18, 0.20), (0.80, 0.20)), ((0.80, 0.20), (0.32, 0.85)))),
    ("tri", (((0.50, 0.15), (0.15, 0.80)), ((0.15, 0.80), (0.85, 0.80)),
             ((0.85, 0.80), (0.50, 0.15)))),
    ("wye", (((0.50, 0.50), (0.50, 0.88)), ((0.50, 0.50), (0.18, 0.16)),
             ((0.50, 0.50), (0.82, 0.16)))),
    ("plusdot", (((0.50, 0.15), (0.50, 0.85)), ((0.15, 0.50), (0.85, 0.50)),
                 ((0.76, 0.18), (0.84, 0.26)))),
    ("eff", (((0.28, 0.15), (0.28, 0.85)), ((0.28, 0.15), (0.80, 0.15)),
             ((0.28, 0.50), (0.70, 0.50)))),
    ("pee", (((0.30, 0.15), (0.30, 0.85)), ((0.30, 0.15), (0.72, 0.15)),
             ((0.72, 0.15), (0.72, 0.45)), ((0.72, 0.45), (0.30, 0.45)))),
    ("cup", (((0.20, 0.15), (0.20, 0.78)), ((0.20, 0.78), (0.80, 0.78)),
             ((0.80, 0.78), (0.80, 0.15)))),
    ("jay", (((0.62, 0.15), (0.62, 0.72)), ((0.62, 0.72), (0.42, 0.86)),
             ((0.42, 0.86), (0.24, 0.72)))),
)

GLYPHS_TRANSFER = (
    ("exmark", (((0.20, 0.20), (0.80, 0.80)), ((0.80, 0.20), (0.20, 0.80)),
                ((0.12, 0.50), (0.28, 0.50)))),
    ("ess", (((0.75, 0.20), (0.30, 0.20)), ((0.30, 0.20), (0.30, 0.50)),
             ((0.30, 0.50), (0.70, 0.50)), ((0.70, 0.50), (0.70, 0.80)),
             ((0.70, 0.80), (0.25, 0.80)))),
    ("dots", (((0.20, 0.20), (0.27, 0.27)), ((0.46, 0.46), (0.54, 0.54)),
              ((0.73, 0.73), (0.80, 0.80)))),
    ("gate", (((0.20, 0.85), (0.20, 0.20)), ((0.20, 0.20), (0.80, 0.20)),
              ((0.80, 0.20), (0.80, 0.85)), ((0.35, 0.52), (0.65, 0.52)))),
    ("arrow", (((0.50, 0.85), (0.50, 0.18)), ((0.50, 0.18), (0.30, 0.40)),
               ((0.50, 0.18), (0.70, 0.40)))),
    ("zedtick", (((0.20, 0.20), (0.80, 0.20)), ((0.80, 0.20), (0.20, 0.80)),
                 ((0.20, 0.80), (0.80, 0.80)), ((0.84, 0.46), (0.95, 0.46)))),
)


def _hsv_point(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _segment_alpha(grid_x, grid_y, seg, thickness, aa):
    (x1, y1), (x2, y2) = seg
    dx, dy = x2 - x1, y2 - y1
    norm2 = dx * dx + dy * dy
    if norm2 < 1e-12:
        dist = np.hypot(grid_x - x1, grid_y - y1)
    else:
        t = ((grid_x - x1) * dx + (grid_y - y1) * dy) / norm2
        t = np.clip(t, 0.0, 1.0)
        dist = np.hypot(grid_x - (x1 + t * dx), grid_y - (y1 + t * dy))
    return np.clip(1.0 - (dist - thickness) / aa, 0.0, 1.0)


def _render(rng, glyph_segments, size, noise, distractors):
    cx = cy = 0.5
    scale = rng.uniform(0.78, 1.10)
    tilt = rng.uniform(-0.12, 0.12)
    tx, ty = rng.uniform(-0.08, 0.08, size=2)
    cos_t, sin_t = np.cos(tilt), np.sin(tilt)

    def warp(pt):
        x, y = pt[0] - cx, pt[1] - cy
        xr = cos_t * x - sin_t * y
        yr = sin_t * x + cos_t * y
        return ((cx + scale * xr + tx) * size, (cy + scale * yr + ty) * size)

    px = (np.arange(size) + 0.5)[None, :].repeat(size, axis=0)
    py = (np.arange(size) + 0.5)[:, None].repeat(size, axis=1)
    thickness = rng.uniform(0.55, 0.95)
    aa = 0.9
    alpha = np.zeros((size, size))
    for seg in glyph_segments:
        alpha = np.maximum(alpha, _segment_alpha(px, py, (warp(seg[0]), warp(seg[1])),
                                                 thickness, aa))

    # low-contrast distractor ticks, uncorrelated with the class
    for _ in range(distractors):
        x1, y1 = rng.uniform(2, size - 2, size=2)
        ang = rng.uniform(0, 2 * np.pi)
        ln = rng.uniform(2.0, 4.5)
        seg = ((x1, y1), (x1 + ln * np.cos(ang), y1 + ln * np.sin(ang)))
        alpha = np.maximum(alpha, 0.45 * _segment_alpha(px, py, seg, thickness, aa))

    fg = np.array(_hsv_point(rng.uniform(0, 1), rng.uniform(0.25, 0.9), rng.uniform(0.60, 0.95)))
    bg = np.array(_hsv_point(rng.uniform(0, 1), rng.uniform(0.0, 0.5), rng.uniform(0.05, 0.30)))
    img = bg[:, None, None] + (fg - bg)[:, None, None] * alpha[None]
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _make(glyphs, n, seed, size, noise, distractors, tag):
    rng = np.random.default_rng(seed)
    k = len(glyphs)
    labels = np.arange(n) % k  # exactly balanced
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        images[i] = _render(rng, glyphs[labels[i]][1], size, noise, distractors)
    return ImageDataset(images, labels.astype(np.int64), k, tag).check()


def make_shapes(n: int, seed: int = 0, size: int = 32, noise: float = 0.06,
                distractors: int = 1) -> ImageDataset:
    """The 10-class desk benchmark."""
    return _make(GLYPHS10, n, seed, size, noise, distractors, "shapes10")


def make_transfer(n: int, seed: int = 0, size: int = 32, noise: float = 0.06,
                  distractors: int = 1) -> ImageDataset:
    """A 6-class set with disjoint glyphs, for frozen-feature transfer."""
    return _make(GLYPHS_TRANSFER, n, seed, size, noise, distractors, "marks6")


SYNTH_KINDS = {
    "shapes10": make_shapes,
    "marks6": make_transfer,
}


def make(kind: str, n: int, seed: int = 0, **kwargs) -> ImageDataset:
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic dataset kind {kind!r}; have {sorted(SYNTH_KINDS)}")
    return SYNTH_KINDS[kind](n, seed, **kwargs)
