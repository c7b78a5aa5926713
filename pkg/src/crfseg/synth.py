"""Procedural face-like scenes with exact label maps and analytic landmarks.

Stands in for real face-segmentation datasets at desk scale: a skin ellipse,
a hair band around its top, and (for the Helen-like schemes) brow, eye, nose
and lip blobs.  Landmarks sit at known points on those shapes in iBUG order,
so the landmark -> initial-segmentation path runs exactly as on real data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import get_scheme


@dataclass
class SynthSpec:
    height: int = 96
    width: int = 96
    scheme: str = "parts3"
    noise: float = 0.03
    seed: int = 0
    center_jitter: float = 4.0
    face_rx: tuple[float, float] = (0.20, 0.26)  # fraction of width
    face_ry: tuple[float, float] = (0.26, 0.32)  # fraction of height
    hair_thickness: tuple[float, float] = (0.15, 0.35)  # fraction of the face radii
    hair_drop: tuple[float, float] = (-0.1, 0.5)  # how far down the sides the hair reaches
    mouth_open: tuple[float, float] = (0.2, 1.0)

    def __post_init__(self):
        get_scheme(self.scheme)


def _ellipse(xs, ys, cx, cy, rx, ry):
    return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0


def _on_ellipse(cx, cy, rx, ry, angles):
    angles = np.asarray(angles, dtype=np.float64)
    return np.stack([cx + rx * np.cos(angles), cy + ry * np.sin(angles)], axis=1)


def synth_sample(spec: SynthSpec, index: int):
    """Returns (image H×W×3 float32 in [0, 1], labels H×W uint8, landmarks 68×2 float64)."""
    rng = np.random.default_rng([spec.seed, index])
    scheme = get_scheme(spec.scheme)
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    cx = (w - 1) / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter)
    cy = (h - 1) / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter) + 0.04 * h
    rx = w * rng.uniform(*spec.face_rx)
    ry = h * rng.uniform(*spec.face_ry)

    thick = rng.uniform(*spec.hair_thickness)
    drop = rng.uniform(*spec.hair_drop)
    hair = _ellipse(xs, ys, cx, cy - 0.1 * ry, rx * (1 + thick), ry * (1 + 0.8 * thick)) & (ys < cy + drop * ry)
    skin = _ellipse(xs, ys, cx, cy, rx, ry)

    # facial feature geometry (always computed; landmarks need it)
    eye_y = cy - 0.15 * ry
    eye_dx, eye_rx, eye_ry = 0.38 * rx, 0.16 * rx, 0.07 * ry
    brow_y, brow_rx, brow_ry = eye_y - 0.17 * ry, 0.2 * rx, 0.035 * ry
    nose_y, nose_rx, nose_ry = cy + 0.12 * ry, 0.1 * rx, 0.16 * ry
    mouth_y, mouth_rx, mouth_ry = cy + 0.5 * ry, 0.3 * rx, 0.1 * ry
    inner_ry = 0.04 * ry * rng.uniform(*spec.mouth_open)
    inner_rx = 0.2 * rx

    labels = np.zeros((h, w), dtype=np.uint8)
    c = scheme.classes
    labels[hair] = c.index("hair")
    labels[skin] = c.index("skin")

    feats = {}
    if scheme.name != "parts3":
        for side, sx in (("right", cx - eye_dx), ("left", cx + eye_dx)):
            feats[side + "_brow"] = _ellipse(xs, ys, sx, brow_y, brow_rx, brow_ry)
            feats[side + "_eye"] = _ellipse(xs, ys, sx, eye_y, eye_rx, eye_ry)
        feats["nose"] = _ellipse(xs, ys, cx, nose_y, nose_rx, nose_ry)
        outer = _ellipse(xs, ys, cx, mouth_y, mouth_rx, mouth_ry)
        inner = _ellipse(xs, ys, cx, mouth_y, inner_rx, inner_ry)
        feats["upper_lip"] = outer & ~inner & (ys < mouth_y)
        feats["lower_lip"] = outer & ~inner & (ys >= mouth_y)
        feats["inner_mouth"] = inner
        for name, mask in feats.items():
            for cls in (name, name.split("_")[-1] + "s"):  # helen9 merges left/right as brows/eyes
                if cls in c:
                    labels[mask] = c.index(cls)
                    break

    # colours
    bg = rng.uniform([0.0, 0.35, 0.45], [0.6, 0.9, 1.0])
    skin_col = np.array([0.85, 0.65, 0.55]) + rng.normal(0, 0.04, 3)
    hair_col = np.array([0.25, 0.17, 0.10]) * rng.uniform(0.5, 1.5)
    grad = rng.uniform(-0.1, 0.1, size=2)
    shade = (grad[0] * (xs / w - 0.5) + grad[1] * (ys / h - 0.5))[..., None]
    img = np.broadcast_to(bg, (h, w, 3)) + shade
    img = np.where(hair[..., None], hair_col, img)
    img = np.where(skin[..., None], skin_col + 0.5 * shade, img)
    palette = {
        "brow": hair_col * 0.8,
        "eye": np.array([0.15, 0.12, 0.1]),
        "nose": skin_col * 0.88,
        "upper_lip": np.array([0.75, 0.3, 0.3]),
        "lower_lip": np.array([0.8, 0.35, 0.35]),
        "inner_mouth": np.array([0.3, 0.05, 0.05]),
    }
    for name, mask in feats.items():
        col = palette.get(name, palette.get(name.split("_")[-1]))
        img = np.where(mask[..., None], col, img)
    if spec.noise > 0:
        img = img + rng.normal(0, spec.noise, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    lm = np.zeros((68, 2))
    jaw_angles = (math.pi + 0.1) - np.arange(17) * (math.pi + 0.2) / 16
    lm[0:17] = _on_ellipse(cx, cy, rx, ry, jaw_angles)
    for start, sx, order in ((17, cx - eye_dx, 1), (22, cx + eye_dx, 1)):
        bx = sx + np.linspace(-brow_rx, brow_rx, 5) * order
        lm[start:start + 5] = np.stack([bx, brow_y - brow_ry * np.sqrt(np.clip(1 - ((bx - sx) / brow_rx) ** 2, 0, 1))], axis=1)
    lm[27:31] = np.stack([np.full(4, cx), np.linspace(eye_y, nose_y + nose_ry, 4)], axis=1)
    lm[31:36] = np.stack([cx + np.linspace(-nose_rx, nose_rx, 5), np.full(5, nose_y + 0.8 * nose_ry)], axis=1)
    eye_angles = math.pi + np.arange(6) * math.pi / 3
    lm[36:42] = _on_ellipse(cx - eye_dx, eye_y, eye_rx, eye_ry, eye_angles)
    lm[42:48] = _on_ellipse(cx + eye_dx, eye_y, eye_rx, eye_ry, eye_angles)
    outer_angles = np.concatenate([math.pi + np.arange(7) * math.pi / 6, np.arange(1, 6) * math.pi / 6])
    lm[48:60] = _on_ellipse(cx, mouth_y, mouth_rx, mouth_ry, outer_angles)
    inner_angles = np.concatenate([math.pi + np.arange(5) * math.pi / 4, np.arange(1, 4) * math.pi / 4])
    lm[60:68] = _on_ellipse(cx, mouth_y, inner_rx, inner_ry, inner_angles)
    return img, labels, lm
