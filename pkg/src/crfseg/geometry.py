"""Landmark alignment, polygon-filled initial segmentations, warping and test-time aggregation.

Coordinates are (x, y) in pixels with pixel centres on integer positions:
pixel ``[r, c]`` sits at ``(x=c, y=r)``.  Landmarks follow the iBUG 68-point
layout: jaw 0-16, right brow 17-21, left brow 22-26, nose 27-35, right eye
36-41, left eye 42-47, outer lip 48-59, inner lip 60-67.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NUM_LANDMARKS = 68
BROW_HALF_WIDTH = 2.0


@dataclass(frozen=True)
class SimilarityTransform:
    """p -> s·R(theta)·p + t."""

    scale: float = 1.0
    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[self.scale * c, -self.scale * s, self.tx], [self.scale * s, self.scale * c, self.ty], [0, 0, 1.0]])

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        m = self.matrix
        return pts @ m[:2, :2].T + m[:2, 2]

    def inverse(self) -> "SimilarityTransform":
        s = 1.0 / self.scale
        c, si = math.cos(-self.theta), math.sin(-self.theta)
        tx = -s * (c * self.tx - si * self.ty)
        ty = -s * (si * self.tx + c * self.ty)
        return SimilarityTransform(s, -self.theta, tx, ty)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """self ∘ other (apply ``other`` first)."""
        m = self.matrix @ other.matrix
        return SimilarityTransform.from_matrix(m)

    @staticmethod
    def from_matrix(m: np.ndarray) -> "SimilarityTransform":
        a, b = m[0, 0], m[1, 0]
        return SimilarityTransform(math.hypot(a, b), math.atan2(b, a), m[0, 2], m[1, 2])

    @staticmethod
    def about(center, scale=1.0, theta=0.0, shift=(0.0, 0.0)) -> "SimilarityTransform":
        """Rotate/scale about ``center`` and then translate by ``shift``."""
        cx, cy = center
        to_origin = SimilarityTransform(1.0, 0.0, -cx, -cy)
        back = SimilarityTransform(1.0, 0.0, cx + shift[0], cy + shift[1])
        return back.compose(SimilarityTransform(scale, theta).compose(to_origin))


def check_landmarks(lm) -> np.ndarray:
    lm = np.asarray(lm, dtype=np.float64)
    if lm.shape != (NUM_LANDMARKS, 2):
        raise ValueError(f"expected {NUM_LANDMARKS}×2 landmarks, got {lm.shape}")
    if not np.all(np.isfinite(lm)):
        raise ValueError("landmarks must be finite")
    return lm


def estimate_similarity(src, dst) -> SimilarityTransform:
    """Least-squares similarity mapping ``src`` onto ``dst`` (closed form, no reflections)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2 or len(src) < 2:
        raise ValueError("need matching arrays of at least two 2-D points")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    var_s = (a**2).sum()
    if var_s < 1e-12:
        raise ValueError("source points are coincident")
    # for 2-D similarities the optimal rotation/scale comes from two cross terms
    sxx = (a * b).sum()  # Σ a·b
    sxy = (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]).sum()  # Σ a×b
    theta = math.atan2(sxy, sxx)
    scale = math.hypot(sxx, sxy) / var_s
    c, s = math.cos(theta), math.sin(theta)
    t = mu_d - scale * np.array([c * mu_s[0] - s * mu_s[1], s * mu_s[0] + c * mu_s[1]])
    return SimilarityTransform(scale, theta, float(t[0]), float(t[1]))


def template_landmarks(all_landmarks: Sequence) -> np.ndarray:
    if len(all_landmarks) == 0:
        raise ValueError("cannot average an empty landmark list")
    return np.mean(np.stack([np.asarray(lm, dtype=np.float64) for lm in all_landmarks]), axis=0)


# ---------------------------------------------------------------------------
# warping


def _sample_bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """img: H×W×C; taps falling outside the image read as zero."""
    h, w = img.shape[:2]
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    out = np.zeros(xs.shape + img.shape[2:], dtype=np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.zeros(xs.shape + img.shape[2:], dtype=np.float64)
            vals[ok] = img[yi[ok], xi[ok]]
            out += wx * wy * vals
    return out


def warp_image(image: np.ndarray, transform: SimilarityTransform, out_size, mode: str = "bilinear") -> np.ndarray:
    """Resample ``image`` into an ``out_size`` canvas where output = transform(input).

    ``image`` is H×W or H×W×C.  Bilinear for intensities, nearest for label
    maps; anything sampled outside the source is 0.
    """
    oh, ow = out_size
    image = np.asarray(image)
    squeeze = image.ndim == 2
    img = image[..., None] if squeeze else image
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    src = transform.inverse().apply(np.stack([xs.ravel(), ys.ravel()], axis=1))
    sx, sy = src[:, 0].reshape(oh, ow), src[:, 1].reshape(oh, ow)
    if mode == "nearest":
        xi = np.floor(sx + 0.5).astype(np.int64)
        yi = np.floor(sy + 0.5).astype(np.int64)
        h, w = img.shape[:2]
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        out = np.zeros((oh, ow) + img.shape[2:], dtype=img.dtype)
        out[ok] = img[yi[ok], xi[ok]]
    elif mode == "bilinear":
        out = _sample_bilinear(img.astype(np.float64), sx, sy)
        if np.issubdtype(image.dtype, np.floating):
            out = out.astype(image.dtype)
    else:
        raise ValueError(f"unknown interpolation {mode!r}")
    return out[..., 0] if squeeze else out


# ---------------------------------------------------------------------------
# polygon fill


def fill_polygon(vertices, shape, value=1, out: np.ndarray | None = None) -> np.ndarray:
    """Scanline even-odd fill; a pixel is inside when its centre is.

    Edges are half-open in y (``ymin <= y < ymax``) and spans half-open in x
    (``x_left <= x < x_right``), so shared edges are painted exactly once.
    """
    h, w = shape
    if out is None:
        out = np.zeros(shape, dtype=np.uint8)
    v = np.asarray(vertices, dtype=np.float64)
    if len(v) < 3:
        return out
    x0, y0 = v[:, 0], v[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    ymin, ymax = np.minimum(y0, y1), np.maximum(y0, y1)
    r_lo = max(int(math.ceil(ymin.min())), 0)
    r_hi = min(int(math.ceil(ymax.max())) - 1, h - 1)
    for r in range(r_lo, r_hi + 1):
        y = float(r)
        active = (ymin <= y) & (y < ymax)
        if not active.any():
            continue
        xa, ya, xb, yb = x0[active], y0[active], x1[active], y1[active]
        xs = np.sort(xa + (y - ya) * (xb - xa) / (yb - ya))
        for left, right in zip(xs[0::2], xs[1::2]):
            c_lo = max(int(math.ceil(left)), 0)
            c_hi = min(int(math.ceil(right)) - 1, w - 1)
            if c_lo <= c_hi:
                out[r, c_lo:c_hi + 1] = value
    return out


def thicken_polyline(points, half_width: float = BROW_HALF_WIDTH) -> np.ndarray:
    """Close an open polyline into a band polygon by offsetting along vertex normals."""
    p = np.asarray(points, dtype=np.float64)
    seg = np.diff(p, axis=0)
    seg_n = np.stack([-seg[:, 1], seg[:, 0]], axis=1)
    seg_n /= np.maximum(np.linalg.norm(seg_n, axis=1, keepdims=True), 1e-12)
    normals = np.zeros_like(p)
    normals[:-1] += seg_n
    normals[1:] += seg_n
    normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
    return np.concatenate([p + half_width * normals, (p - half_width * normals)[::-1]])


@dataclass
class Region:
    name: str
    label: int
    indices: tuple[int, ...]
    open: bool = False


@dataclass
class ClassScheme:
    """Class names plus the landmark regions painted (in order) for the initial segmentation."""

    name: str
    classes: tuple[str, ...]
    regions: tuple[Region, ...]
    mirror_pairs: tuple[tuple[int, int], ...] = ()

    @property
    def num_labels(self) -> int:
        return len(self.classes)

    def index(self, cls: str) -> int:
        return self.classes.index(cls)

    def mirror_permutation(self) -> np.ndarray:
        perm = np.arange(self.num_labels)
        for a, b in self.mirror_pairs:
            perm[a], perm[b] = b, a
        return perm


_JAW = tuple(range(0, 17))
_FACE = _JAW + tuple(range(26, 16, -1))  # jaw, then back across the brows
_NOSE = (27, 31, 32, 33, 34, 35)
_UPPER_LIP = tuple(range(48, 55)) + (64, 63, 62, 61, 60)
_LOWER_LIP = tuple(range(54, 60)) + (48, 60, 67, 66, 65, 64)
_MOUTH = tuple(range(60, 68))


def _regions(mapping: dict[str, int]) -> tuple[Region, ...]:
    table = [
        ("skin", _FACE, False),
        ("right_brow", tuple(range(17, 22)), True),
        ("left_brow", tuple(range(22, 27)), True),
        ("right_eye", tuple(range(36, 42)), False),
        ("left_eye", tuple(range(42, 48)), False),
        ("nose", _NOSE, False),
        ("upper_lip", _UPPER_LIP, False),
        ("lower_lip", _LOWER_LIP, False),
        ("inner_mouth", _MOUTH, False),
    ]
    return tuple(Region(n, mapping[n], idx, op) for n, idx, op in table if n in mapping)


SCHEMES: dict[str, ClassScheme] = {
    "parts3": ClassScheme("parts3", ("background", "skin", "hair"), _regions({"skin": 1})),
    "helen9": ClassScheme(
        "helen9",
        ("background", "skin", "brows", "eyes", "nose", "upper_lip", "inner_mouth", "lower_lip", "hair"),
        _regions(
            {"skin": 1, "right_brow": 2, "left_brow": 2, "right_eye": 3, "left_eye": 3, "nose": 4,
             "upper_lip": 5, "inner_mouth": 6, "lower_lip": 7}
        ),
    ),
    "helen11": ClassScheme(
        "helen11",
        ("background", "skin", "left_brow", "right_brow", "left_eye", "right_eye", "nose",
         "upper_lip", "inner_mouth", "lower_lip", "hair"),
        _regions(
            {"skin": 1, "left_brow": 2, "right_brow": 3, "left_eye": 4, "right_eye": 5, "nose": 6,
             "upper_lip": 7, "inner_mouth": 8, "lower_lip": 9}
        ),
        mirror_pairs=((2, 3), (4, 5)),
    ),
}


def get_scheme(name: "str | ClassScheme") -> ClassScheme:
    if isinstance(name, ClassScheme):
        return name
    try:
        return SCHEMES[name]
    except KeyError:
        raise ValueError(f"unknown class scheme {name!r}; known: {sorted(SCHEMES)}") from None


def format_region_table(scheme: ClassScheme) -> str:
    lines = [f"scheme {scheme.name}", f"classes {' '.join(scheme.classes)}"]
    for a, b in scheme.mirror_pairs:
        lines.append(f"mirror {a} {b}")
    for r in scheme.regions:
        kind = "open" if r.open else "closed"
        lines.append(f"region {r.name} {r.label} {kind} {','.join(map(str, r.indices))}")
    return "\n".join(lines) + "\n"


def parse_region_table(text: str, name: str = "custom") -> ClassScheme:
    """Inverse of :func:`format_region_table`.

    Lines: ``scheme NAME``, ``classes n0 n1 ...``, ``mirror a b`` and
    ``region NAME LABEL open|closed i,j,k,...``; ``#`` starts a comment.
    """
    classes: tuple[str, ...] = ()
    regions, pairs = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "scheme" and len(parts) == 2:
            name = parts[1]
        elif parts[0] == "classes":
            classes = tuple(parts[1:])
        elif parts[0] == "mirror" and len(parts) == 3:
            pairs.append((int(parts[1]), int(parts[2])))
        elif parts[0] == "region" and len(parts) == 5 and parts[3] in ("open", "closed"):
            idx = tuple(int(i) for i in parts[4].split(","))
            if any(not 0 <= i < NUM_LANDMARKS for i in idx):
                raise ValueError(f"line {lineno}: landmark index out of range")
            regions.append(Region(parts[1], int(parts[2]), idx, parts[3] == "open"))
        else:
            raise ValueError(f"line {lineno}: cannot parse {raw!r}")
    if not classes:
        raise ValueError("region table has no 'classes' line")
    for r in regions:
        if not 0 < r.label < len(classes):
            raise ValueError(f"region {r.name} label {r.label} outside 1..{len(classes) - 1}")
    return ClassScheme(name, classes, tuple(regions), tuple(pairs))


def initial_segmentation(lm, size, scheme: ClassScheme | str = "parts3") -> np.ndarray:
    """Label map painted from landmark polygons, back to front; unpainted pixels are background."""
    if isinstance(scheme, str):
        scheme = get_scheme(scheme)
    lm = check_landmarks(lm)
    out = np.zeros(size, dtype=np.uint8)
    for region in scheme.regions:
        pts = lm[list(region.indices)]
        poly = thicken_polyline(pts) if region.open else pts
        fill_polygon(poly, size, region.label, out=out)
    return out


def one_hot(labels: np.ndarray, num_labels: int) -> np.ndarray:
    """H×W label map -> P×H×W float32."""
    labels = np.asarray(labels)
    if labels.size and labels.max() >= num_labels:
        raise ValueError(f"label {labels.max()} >= {num_labels}")
    return (np.arange(num_labels)[:, None, None] == labels[None]).astype(np.float32)


def mirror_labels(labels: np.ndarray, scheme: ClassScheme) -> np.ndarray:
    return scheme.mirror_permutation()[labels[:, ::-1]].astype(labels.dtype)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentParams:
    translate: float = 5.0
    mirror: bool = True
    crop: tuple[int, int] = (96, 96)
    rotate_deg: float = 0.0
    scale: float = 0.0
    seg_rotate_deg: float = 0.0
    seg_scale: float = 0.0
    seg_translate: float = 0.0

    @classmethod
    def local(cls, crop=(80, 80)) -> "AugmentParams":
        return cls(translate=5.0, mirror=True, crop=crop, rotate_deg=7.5, scale=0.05,
                   seg_rotate_deg=0.75, seg_scale=0.005, seg_translate=0.5)


def _center_crop(a: np.ndarray, crop) -> np.ndarray:
    h, w = a.shape[:2]
    ch, cw = crop
    if ch > h or cw > w:
        raise ValueError(f"crop {crop} larger than input {(h, w)}")
    r, c = (h - ch) // 2, (w - cw) // 2
    return a[r:r + ch, c:c + cw]


def augment(image: np.ndarray, labels: np.ndarray, init_seg: np.ndarray, params: AugmentParams,
            rng: np.random.Generator, scheme: ClassScheme | None = None):
    """Random similarity jitter + optional mirror + central crop.

    ``image`` is H×W×C float, ``labels`` and ``init_seg`` are H×W label maps.
    Integer translations without rotation/scale are exact pixel shifts.
    """
    h, w = labels.shape
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    shift = rng.integers(-int(params.translate), int(params.translate) + 1, size=2) if params.translate else (0, 0)
    theta = math.radians(rng.uniform(-params.rotate_deg, params.rotate_deg)) if params.rotate_deg else 0.0
    s = 1.0 + rng.uniform(-params.scale, params.scale) if params.scale else 1.0
    flip = bool(params.mirror and rng.random() < 0.5)
    tf = SimilarityTransform.about(center, s, theta, (float(shift[0]), float(shift[1])))

    seg_tf = tf
    if params.seg_rotate_deg or params.seg_scale or params.seg_translate:
        jitter = SimilarityTransform.about(
            center,
            1.0 + rng.uniform(-params.seg_scale, params.seg_scale),
            math.radians(rng.uniform(-params.seg_rotate_deg, params.seg_rotate_deg)),
            tuple(rng.uniform(-params.seg_translate, params.seg_translate, size=2)),
        )
        seg_tf = jitter.compose(tf)

    img = warp_image(image, tf, (h, w), "bilinear")
    lab = warp_image(labels, tf, (h, w), "nearest")
    seg = warp_image(init_seg, seg_tf, (h, w), "nearest")
    if flip:
        img = img[:, ::-1]
        if scheme is not None:
            lab, seg = mirror_labels(lab, scheme), mirror_labels(seg, scheme)
        else:
            lab, seg = lab[:, ::-1], seg[:, ::-1]
    return (
        np.ascontiguousarray(_center_crop(img, params.crop)),
        np.ascontiguousarray(_center_crop(lab, params.crop)),
        np.ascontiguousarray(_center_crop(seg, params.crop)),
    )


# ---------------------------------------------------------------------------
# test-time oversampling and aggregation


def crop_origins(h: int, w: int, crop) -> list[tuple[int, int]]:
    """Top-left corners of the centre crop and the four corner crops."""
    ch, cw = crop
    return [((h - ch) // 2, (w - cw) // 2), (0, 0), (0, w - cw), (h - ch, 0), (h - ch, w - cw)]


def coverage_count(h: int, w: int, crop) -> np.ndarray:
    cover = np.zeros((h, w), dtype=np.int64)
    for r, c in crop_origins(h, w, crop):
        cover[r:r + crop[0], c:c + crop[1]] += 2  # plain + mirrored pass
    return cover


def oversample_infer(
    model: Callable[[np.ndarray], np.ndarray],
    inputs: np.ndarray,
    crop=(96, 96),
    flip_input: Callable[[np.ndarray], np.ndarray] | None = None,
    flip_output: Callable[[np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """Average a C×H×W -> P×h×w model over 5 crops × {plain, mirrored}.

    ``flip_input``/``flip_output`` default to a left-right flip of the last
    axis; pass versions that also swap left/right channels when the class
    scheme has mirrored pairs.
    """
    flip_in = flip_input or (lambda a: a[..., ::-1])
    flip_out = flip_output or (lambda a: a[..., ::-1])
    _, h, w = inputs.shape
    ch, cw = crop
    if ch > h or cw > w:
        raise ValueError(f"input {(h, w)} smaller than crop {crop}")
    if coverage_count(h, w, crop).min() == 0:
        raise ValueError(f"crops of {crop} leave pixels of {(h, w)} uncovered")
    total = None
    cover = np.zeros((h, w), dtype=np.int64)
    for r, c in crop_origins(h, w, crop):
        patch = inputs[:, r:r + ch, c:c + cw]
        for mirrored in (False, True):
            out = model(np.ascontiguousarray(flip_in(patch))) if mirrored else model(patch)
            out = np.asarray(flip_out(out) if mirrored else out, dtype=np.float64)
            if total is None:
                total = np.zeros((out.shape[0], h, w))
            total[:, r:r + ch, c:c + cw] += out
            cover[r:r + ch, c:c + cw] += 1
    avg = total / cover
    return avg / avg.sum(axis=0, keepdims=True)


def resize_probs(probs: np.ndarray, out_hw) -> np.ndarray:
    """Bilinear resize of a P×H×W map (pixel-centre aligned)."""
    p, h, w = probs.shape
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return probs
    ys = (np.arange(oh) + 0.5) * h / oh - 0.5
    xs = (np.arange(ow) + 0.5) * w / ow - 0.5
    gx, gy = np.meshgrid(np.clip(xs, 0, w - 1), np.clip(ys, 0, h - 1))
    out = _sample_bilinear(np.moveaxis(probs, 0, -1), gx, gy)
    return np.moveaxis(out, -1, 0)


@dataclass
class LocalOutput:
    probs: np.ndarray  # Pl×h×w, channel 0 is background
    origin: tuple[int, int]  # (row, col) of the top-left corner on the global canvas
    classes: Sequence[int] = field(default_factory=list)  # global class id for each channel


def aggregate_global_local(global_out: np.ndarray, locals_: Sequence[LocalOutput] = (), out_hw=None) -> np.ndarray:
    """Argmax of the global map, overwritten by each local model's non-background pixels.

    Later entries in ``locals_`` win where placements overlap.
    """
    g = resize_probs(global_out, out_hw) if out_hw is not None else global_out
    labels = g.argmax(axis=0).astype(np.int64)
    h, w = labels.shape
    for loc in locals_:
        r, c = loc.origin
        lh, lw = loc.probs.shape[1:]
        if r < 0 or c < 0 or r + lh > h or c + lw > w:
            raise ValueError(f"local placement {loc.origin}+{(lh, lw)} leaves the canvas {(h, w)}")
        classes = np.asarray(loc.classes if len(loc.classes) else range(loc.probs.shape[0]))
        local_arg = loc.probs.argmax(axis=0)
        fg = local_arg != 0
        view = labels[r:r + lh, c:c + lw]
        view[fg] = classes[local_arg[fg]]
    return labels
