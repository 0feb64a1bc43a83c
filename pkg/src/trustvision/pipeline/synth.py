"""Procedural stand-in for field imagery.

Every class is a family of windowed gratings: an orientation, a spatial
frequency, and an elongated envelope ("leaf") shape.  Class prototypes
depend only on ``family_seed`` and the class index, so corpora drawn with
different ``seed`` values share the same species and can be mixed.

``intra_class_variation`` scales the per-instance warp (phase, position,
rotation, frequency, envelope growth).  Each instance also draws a growth
stage in [0, 1); it sets the envelope size and yields the "early"/"late"
strata tag.  ``lookalike_pairs`` pull the second class's prototype toward
the first one's by the given strength.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import ClassSet, Corpus, TaxonRecord

_PHI = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 12
    examples_per_class: int = 60
    image_size: int = 32
    intra_class_variation: float = 1.0
    lookalike_pairs: tuple[tuple[int, int, float], ...] = ()
    seed: int = 0
    family_seed: int = 0
    noise: float = 0.05
    channels: int = 1
    class_offset: int = 0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "lookalike_pairs", tuple(tuple(p) for p in self.lookalike_pairs))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.examples_per_class < 2:
            raise ValueError("examples_per_class must be >= 2")
        if self.intra_class_variation < 0:
            raise ValueError("intra_class_variation must be >= 0")
        for a, b, s in self.lookalike_pairs:
            if not 0.0 <= s <= 1.0:
                raise ValueError("lookalike similarity must lie in [0, 1]")
            for c in (a, b):
                if not 0 <= c < self.num_classes:
                    raise ValueError(f"lookalike class {c} out of range")


@dataclass(frozen=True)
class Prototype:
    theta: float
    freq: float
    leaf_angle: float
    aspect: float
    sigma: float
    contrast: float = 0.4


def prototype(family_seed: int, class_index: int) -> Prototype:
    rng = np.random.default_rng([family_seed, class_index])
    # low-discrepancy placement keeps distinct classes apart
    u = (class_index * _PHI + rng.uniform(-0.02, 0.02)) % 1.0
    w = (class_index * _PHI * _PHI * 3.0 + rng.uniform(-0.05, 0.05)) % 1.0
    return Prototype(
        theta=np.pi * u,
        freq=0.08 + 0.22 * w,
        leaf_angle=rng.uniform(0.0, np.pi),
        aspect=rng.uniform(1.0, 2.5),
        sigma=rng.uniform(5.0, 8.0),
    )


def _blend(a: Prototype, b: Prototype, s: float) -> Prototype:
    mix = lambda x, y: (1.0 - s) * y + s * x  # noqa: E731
    return Prototype(mix(a.theta, b.theta), mix(a.freq, b.freq), mix(a.leaf_angle, b.leaf_angle),
                     mix(a.aspect, b.aspect), mix(a.sigma, b.sigma), mix(a.contrast, b.contrast))


def class_prototypes(config: SynthConfig) -> list[Prototype]:
    protos = [prototype(config.family_seed, config.class_offset + c) for c in range(config.num_classes)]
    for a, b, s in config.lookalike_pairs:
        protos[b] = _blend(protos[a], protos[b], s)
    return protos


def synth_class_set(config: SynthConfig) -> ClassSet:
    recs = []
    for c in range(config.num_classes):
        k = config.class_offset + c
        genus = f"Synthgenus{k // 3:02d}"
        recs.append(TaxonRecord(c, f"{genus} species{k:03d}", f"synthetic weed {k}", genus,
                                f"Synthaceae{k // 6:02d}", config.examples_per_class))
    return ClassSet.from_records(recs, config.name or f"synth-{config.num_classes}")


def render(proto: Prototype, size: int, variation: float, stage: float, rng: np.random.Generator,
           noise: float, channels: int = 1) -> np.ndarray:
    v = variation
    theta = proto.theta + v * rng.normal(0.0, 0.12)
    freq = proto.freq * (1.0 + v * rng.normal(0.0, 0.06))
    phase = min(v, 1.0) * rng.uniform(0.0, 2.0 * np.pi)
    cx, cy = (size - 1) / 2.0 + v * rng.uniform(-size / 6, size / 6, size=2)
    leaf = proto.leaf_angle + v * rng.normal(0.0, 0.25)
    sigma = proto.sigma * (1.0 + min(v, 1.0) * 0.6 * (stage - 0.5))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(leaf) + dy * np.sin(leaf)
    w = -dx * np.sin(leaf) + dy * np.cos(leaf)
    env = np.exp(-(u * u) / (2 * (sigma * proto.aspect) ** 2) - (w * w) / (2 * (sigma / proto.aspect) ** 2))
    wave = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img = 0.5 + proto.contrast * (0.35 + 0.65 * env) * wave
    img = np.repeat(img[..., None], channels, axis=2)
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(config: SynthConfig) -> Corpus:
    """Deterministic labeled corpus: ``examples_per_class`` images per class, class-major order."""
    protos = class_prototypes(config)
    rng = np.random.default_rng([config.seed, 7919])
    n = config.num_classes * config.examples_per_class
    images = np.empty((n, config.image_size, config.image_size, config.channels))
    labels = np.empty(n, dtype=int)
    ids, tags = [], []
    pairs = {}
    for a, b, _ in config.lookalike_pairs:
        pairs.setdefault(a, []).append(f"lookalike:{a}-{b}")
        pairs.setdefault(b, []).append(f"lookalike:{a}-{b}")
    i = 0
    for c in range(config.num_classes):
        for j in range(config.examples_per_class):
            stage = rng.uniform(0.0, 1.0)
            images[i] = render(protos[c], config.image_size, config.intra_class_variation, stage, rng,
                               config.noise, config.channels)
            labels[i] = c
            ids.append(f"s{config.seed}-c{c:03d}-{j:04d}")
            tags.append(frozenset(["early" if stage < 0.5 else "late", *pairs.get(c, [])]))
            i += 1
    meta = {"synth": {"num_classes": config.num_classes, "examples_per_class": config.examples_per_class,
                      "variation": config.intra_class_variation, "seed": config.seed,
                      "family_seed": config.family_seed, "class_offset": config.class_offset}}
    return Corpus(images, labels, tuple(ids), tuple(tags), synth_class_set(config), meta)


def generate_ood(n: int, image_size: int = 32, seed: int = 0, channels: int = 1) -> np.ndarray:
    """Out-of-family images: smooth random blobs with no oriented texture."""
    rng = np.random.default_rng([seed, 104729])
    out = np.empty((n, image_size, image_size, channels))
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    for i in range(n):
        img = np.full((image_size, image_size), rng.uniform(0.2, 0.8))
        for _ in range(rng.integers(2, 6)):
            cx, cy = rng.uniform(0, image_size, size=2)
            s = rng.uniform(2.0, 6.0)
            img += rng.uniform(-0.4, 0.4) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
        img = np.repeat(img[..., None], channels, axis=2) + rng.normal(0, 0.05, size=(image_size, image_size, channels))
        out[i] = np.clip(img, 0.0, 1.0)
    return out
