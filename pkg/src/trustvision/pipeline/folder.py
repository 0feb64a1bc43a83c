"""Generic folder-of-images reader with a label CSV."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image

from ..core import ClassSet, Corpus, TaxonRecord


def load_image(path, image_size: int, channels: int = 1) -> np.ndarray:
    """Decode, convert and resize one image to an (H, W, C) array in [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB").resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[..., None] if channels == 1 else arr


def load_image_folder(root, labels_csv, image_size: int = 32, channels: int = 1,
                      class_set: ClassSet | None = None, name: str = "") -> Corpus:
    """Read ``labels_csv`` with columns ``path,label`` relative to ``root``.

    ``label`` is a scientific name.  Without ``class_set`` the classes are
    the sorted distinct labels.
    """
    root = Path(root)
    with open(labels_csv, newline="", encoding="utf-8") as fh:
        rows = [(r["path"], r["label"].strip()) for r in csv.DictReader(fh)]
    if class_set is None:
        names = sorted({lab for _, lab in rows})
        class_set = ClassSet(tuple(TaxonRecord(i, n, family="unknown") for i, n in enumerate(names)), name)
    images = np.stack([load_image(root / p, image_size, channels) for p, _ in rows]) if rows else \
        np.zeros((0, image_size, image_size, channels))
    labels = np.array([class_set.index_of(lab) for _, lab in rows], dtype=int)
    return Corpus(images, labels, tuple(p for p, _ in rows), tuple(frozenset() for _ in rows), class_set,
                  {"source": str(root)})
