"""On-disk dataset layout shared by the ``synth``, ``train`` and ``eval`` commands.

::

    DIR/regions.txt              class scheme + landmark region table
    DIR/images/00000.png         8-bit RGB
    DIR/labels/00000.png         8-bit single channel, class indices
    DIR/landmarks/00000.txt      68 lines of "x y"
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry


class DataError(Exception):
    pass


def read_landmarks(path) -> np.ndarray:
    try:
        rows = [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        lm = np.array([[float(a), float(b)] for a, b in rows])
    except (ValueError, OSError) as exc:
        raise DataError(f"{path}: cannot read landmarks ({exc})") from exc
    try:
        return geometry.check_landmarks(lm)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_landmarks(path, lm) -> None:
    lm = geometry.check_landmarks(lm)
    Path(path).write_text("".join(f"{x:.6f} {y:.6f}\n" for x, y in lm), encoding="utf-8")


def read_image(path) -> np.ndarray:
    """RGB PNG -> H×W×3 float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_labels(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise DataError(f"{path}: label maps must be single-channel, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8).copy()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_labels(path, labels: np.ndarray) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path)


def write_scheme(root, scheme: geometry.ClassScheme) -> None:
    Path(root, "regions.txt").write_text(geometry.format_region_table(scheme), encoding="utf-8")


def read_scheme(root) -> geometry.ClassScheme:
    path = Path(root, "regions.txt")
    if not path.exists():
        raise DataError(f"{path} missing")
    try:
        return geometry.parse_region_table(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def sample_ids(root) -> list[str]:
    images = Path(root, "images")
    if not images.is_dir():
        raise DataError(f"{images} is not a directory")
    ids = sorted(p.stem for p in images.glob("*.png"))
    if not ids:
        raise DataError(f"no images in {images}")
    return ids


def load_dataset(root):
    """Returns (scheme, list of trainer.Sample) with initial segmentations painted from landmarks."""
    from .trainer import Sample

    scheme = read_scheme(root)
    samples = []
    for sid in sample_ids(root):
        img = read_image(Path(root, "images", sid + ".png"))
        lab = read_labels(Path(root, "labels", sid + ".png"))
        lm = read_landmarks(Path(root, "landmarks", sid + ".txt"))
        if lab.shape != img.shape[:2]:
            raise DataError(f"{sid}: label map {lab.shape} does not match image {img.shape[:2]}")
        if lab.max() >= scheme.num_labels:
            raise DataError(f"{sid}: label {lab.max()} outside scheme {scheme.name}")
        samples.append(Sample(img, lab, geometry.initial_segmentation(lm, lab.shape, scheme), lm))
    return scheme, samples
