"""Procedural grayscale face renderer used as a stand-in for visible frames.

Each subject is a fixed set of shape parameters; frames of the same subject
add small pose and expression jitter. Output is H x W in [0, 1] on a bright
(poster-white) background.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass(frozen=True)
class FaceParams:
    head_w: float
    head_h: float
    skin: float
    hair: float
    hair_line: float
    eye_y: float
    eye_dx: float
    eye_r: float
    brow_gap: float
    nose_len: float
    mouth_y: float
    mouth_w: float
    glasses: bool
    background: float

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "FaceParams":
        return cls(
            head_w=rng.uniform(0.42, 0.55),
            head_h=rng.uniform(0.55, 0.68),
            skin=rng.uniform(0.45, 0.7),
            hair=rng.uniform(0.05, 0.3),
            hair_line=rng.uniform(-0.45, -0.25),
            eye_y=rng.uniform(-0.18, -0.05),
            eye_dx=rng.uniform(0.15, 0.22),
            eye_r=rng.uniform(0.045, 0.07),
            brow_gap=rng.uniform(0.08, 0.13),
            nose_len=rng.uniform(0.12, 0.2),
            mouth_y=rng.uniform(0.22, 0.32),
            mouth_w=rng.uniform(0.12, 0.2),
            glasses=bool(rng.random() < 0.25),
            background=rng.uniform(0.85, 1.0),
        )


def _ellipse(x, y, cx, cy, rx, ry):
    return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0


def render_face(params: FaceParams, size: int = 64, rng: np.random.Generator | None = None) -> np.ndarray:
    """Rasterize one frame; ``rng`` adds per-frame pose/expression jitter."""
    jitter = rng if rng is not None else np.random.default_rng(0)
    scale = 0.0 if rng is None else 1.0
    dx, dy = scale * jitter.normal(0, 0.02, 2)
    smile = scale * jitter.normal(0, 0.02)
    blink = 1.0 - scale * abs(jitter.normal(0, 0.2))
    c = (2.0 * np.arange(size) + 1.0) / size - 1.0
    y, x = np.meshgrid(c, c, indexing="ij")
    x = x - dx
    y = y - dy
    p = params
    img = np.full((size, size), p.background)
    # shoulders and neck
    img[_ellipse(x, y, 0.0, 1.25, 0.95, 0.45)] = p.skin * 0.6
    img[(np.abs(x) < p.head_w * 0.45) & (y > 0.3) & (y < 1.0)] = p.skin * 0.9
    head = _ellipse(x, y, 0.0, 0.0, p.head_w, p.head_h)
    img[head] = p.skin
    # ears
    for side in (-1, 1):
        img[_ellipse(x, y, side * p.head_w, p.eye_y + 0.05, 0.06, 0.11)] = p.skin * 0.95
    hair = _ellipse(x, y, 0.0, -0.08, p.head_w * 1.08, p.head_h * 1.02) & (y < p.hair_line + 0.08 * np.abs(x))
    img[hair] = p.hair
    for side in (-1, 1):
        ex = side * p.eye_dx
        img[_ellipse(x, y, ex, p.eye_y, p.eye_r * 1.6, p.eye_r * blink)] = 0.95
        img[_ellipse(x, y, ex, p.eye_y, p.eye_r * 0.7, p.eye_r * 0.7 * blink)] = 0.08
        brow = (np.abs(x - ex) < p.eye_r * 1.8) & (np.abs(y - (p.eye_y - p.brow_gap)) < 0.018)
        img[brow] = p.hair * 0.8
        if p.glasses:
            ring = _ellipse(x, y, ex, p.eye_y, p.eye_r * 2.4, p.eye_r * 2.0) & \
                ~_ellipse(x, y, ex, p.eye_y, p.eye_r * 2.0, p.eye_r * 1.6)
            img[ring] = 0.15
    nose = (np.abs(x) < 0.03 + 0.1 * (y - p.eye_y) * 0.5) & (y > p.eye_y + 0.05) & (y < p.eye_y + 0.05 + p.nose_len)
    img[nose] = p.skin * 0.8
    mouth_curve = p.mouth_y - smile * (1 - (x / p.mouth_w) ** 2)
    mouth = (np.abs(x) < p.mouth_w) & (np.abs(y - mouth_curve) < 0.025)
    img[mouth] = 0.25
    img = gaussian_filter(img, 0.6)
    return np.clip(img, 0.0, 1.0)


def render_subjects(n_subjects: int, frames_per_subject: int, size: int = 64, seed: int = 0):
    """Yield ``(subject_id, frame_index, image)`` for a seeded population."""
    root = np.random.default_rng(seed)
    for s in range(n_subjects):
        params = FaceParams.sample(root)
        for f in range(frames_per_subject):
            frame_rng = np.random.default_rng([seed, s, f])
            yield f"S{s:03d}", f, render_face(params, size, frame_rng)
