"""Procedural desk-scale dataset: small labeled images drawn per class.

Each class has a distinctive silhouette and palette so that latent codes
separate well and a caption template per class is meaningful. Images are
(3, S, S) floats in [0, 1], deterministic given the rng stream.
"""

from __future__ import annotations

import numpy as np

from .core import ImageTensor, SeededRng, clamp_pixels

CLASSES = ["eiffel_tower", "tree", "chimpanzee", "lion", "cabin"]


def _grid(size):
    ys, xs = np.mgrid[0:size, 0:size]
    return ys / (size - 1), xs / (size - 1)


def _paint(size, bg, fg, mask):
    img = np.empty((3, size, size))
    for c in range(3):
        img[c] = np.where(mask, fg[c], bg[c])
    return img


def _draw_eiffel_tower(size, jx, jy):
    ys, xs = _grid(size)
    # widening lattice tower against a pale sky
    half_width = 0.04 + 0.38 * ys
    mask = (np.abs(xs - 0.5 - jx) < half_width) & (ys > 0.08 + jy)
    return _paint(size, bg=(0.55, 0.75, 0.95), fg=(0.35, 0.3, 0.3), mask=mask)


def _draw_tree(size, jx, jy):
    ys, xs = _grid(size)
    crown = (xs - 0.5 - jx) ** 2 + (ys - 0.35 - jy) ** 2 < 0.09
    trunk = (np.abs(xs - 0.5 - jx) < 0.06) & (ys > 0.5)
    img = _paint(size, bg=(0.7, 0.85, 1.0), fg=(0.1, 0.55, 0.15), mask=crown)
    for c, v in enumerate((0.45, 0.3, 0.15)):
        img[c] = np.where(trunk & ~crown, v, img[c])
    return img


def _draw_chimpanzee(size, jx, jy):
    ys, xs = _grid(size)
    head = (xs - 0.5 - jx) ** 2 + (ys - 0.4 - jy) ** 2 < 0.08
    face = (xs - 0.5 - jx) ** 2 + (ys - 0.45 - jy) ** 2 < 0.03
    img = _paint(size, bg=(0.25, 0.4, 0.2), fg=(0.15, 0.1, 0.08), mask=head)
    for c, v in enumerate((0.75, 0.6, 0.5)):
        img[c] = np.where(face, v, img[c])
    return img


def _draw_lion(size, jx, jy):
    ys, xs = _grid(size)
    mane = (xs - 0.5 - jx) ** 2 + (ys - 0.45 - jy) ** 2 < 0.1
    face = (xs - 0.5 - jx) ** 2 + (ys - 0.45 - jy) ** 2 < 0.045
    img = _paint(size, bg=(0.9, 0.8, 0.55), fg=(0.65, 0.35, 0.1), mask=mane)
    for c, v in enumerate((0.95, 0.8, 0.45)):
        img[c] = np.where(face, v, img[c])
    return img


def _draw_cabin(size, jx, jy):
    ys, xs = _grid(size)
    body = (np.abs(xs - 0.5 - jx) < 0.28) & (ys > 0.45 + jy) & (ys < 0.85)
    roof = (ys > 0.25 + jy) & (ys < 0.48 + jy) & (np.abs(xs - 0.5 - jx) < (ys - 0.2 - jy))
    img = _paint(size, bg=(0.75, 0.85, 0.9), fg=(0.5, 0.3, 0.15), mask=body)
    for c, v in enumerate((0.6, 0.15, 0.1)):
        img[c] = np.where(roof, v, img[c])
    return img


_PAINTERS = {
    "eiffel_tower": _draw_eiffel_tower,
    "tree": _draw_tree,
    "chimpanzee": _draw_chimpanzee,
    "lion": _draw_lion,
    "cabin": _draw_cabin,
}


def make_image(label: str, size: int, rng: SeededRng) -> ImageTensor:
    """One image of the given class with per-instance jitter and grain."""
    if label not in _PAINTERS:
        raise KeyError(f"unknown class {label!r}; known: {CLASSES}")
    jx = float(rng.uniform(-0.08, 0.08))
    jy = float(rng.uniform(-0.05, 0.05))
    img = _PAINTERS[label](size, jx, jy)
    img = img + 0.03 * rng.standard_normal(img.shape)
    return ImageTensor(clamp_pixels(img), label=label)


def make_dataset(n: int, size: int, rng: SeededRng, classes=None) -> list[ImageTensor]:
    """n labeled images cycling through the class list, deterministic per rng."""
    classes = list(classes) if classes is not None else CLASSES
    images = []
    for i in range(n):
        label = classes[i % len(classes)]
        images.append(make_image(label, size, rng.child("image", i)))
    return images
