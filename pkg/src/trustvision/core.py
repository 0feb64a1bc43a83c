"""Domain types, taxonomy handling, species curation and dataset splitting."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import container

TAXONOMY_HEADER = ["class_id", "scientific_name", "common_name", "genus", "family", "image_count"]


class CoreError(Exception):
    pass


class UnknownClass(CoreError, KeyError):
    def __init__(self, class_id):
        super().__init__(class_id)
        self.class_id = class_id

    def __str__(self):
        return f"unknown class {self.class_id!r}"


class InsufficientExamples(CoreError):
    def __init__(self, class_id, available: int, required: int):
        super().__init__(f"class {class_id} has {available} examples, needs more than {required}")
        self.class_id = class_id


@dataclass(frozen=True)
class TaxonRecord:
    class_id: int
    scientific_name: str
    common_name: str = ""
    genus: str = ""
    family: str = ""
    image_count: int = 0

    def __post_init__(self):
        if not self.genus:
            # binomial names carry their genus as the first word
            object.__setattr__(self, "genus", self.scientific_name.split(" ")[0])
        if not self.genus or not self.family:
            raise ValueError(f"{self.scientific_name!r}: genus and family must be nonempty")
        if self.image_count < 0:
            raise ValueError("image_count must be >= 0")


@dataclass(frozen=True)
class ClassSet:
    taxa: tuple[TaxonRecord, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "taxa", tuple(self.taxa))
        for i, t in enumerate(self.taxa):
            if t.class_id != i:
                raise ValueError(f"class ids must be dense 0..C-1 (position {i} holds {t.class_id})")
        names = [t.scientific_name for t in self.taxa]
        if len(set(names)) != len(names):
            raise ValueError("duplicate scientific names in ClassSet")

    def __len__(self):
        return len(self.taxa)

    def __iter__(self):
        return iter(self.taxa)

    @property
    def names(self) -> list[str]:
        return [t.scientific_name for t in self.taxa]

    def index_of(self, scientific_name: str) -> int:
        for t in self.taxa:
            if t.scientific_name == scientific_name:
                return t.class_id
        raise UnknownClass(scientific_name)

    @classmethod
    def from_records(cls, records: Iterable[TaxonRecord], name: str = "") -> "ClassSet":
        """Build a set from records in order, re-densifying class ids."""
        return cls(tuple(replace(r, class_id=i) for i, r in enumerate(records)), name)

    @classmethod
    def generic(cls, n: int, name: str = "") -> "ClassSet":
        return cls.from_records(
            (TaxonRecord(i, f"Species{i:03d} synthetica", f"species {i}", f"Species{i:03d}", "Synthaceae")
             for i in range(n)),
            name or f"synthetic-{n}",
        )

    # serialization -------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TAXONOMY_HEADER)
        for t in self.taxa:
            w.writerow([t.class_id, t.scientific_name, t.common_name, t.genus, t.family, t.image_count])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, name: str = "") -> "ClassSet":
        rows = list(csv.DictReader(io.StringIO(text)))
        if rows and list(rows[0].keys()) != TAXONOMY_HEADER:
            raise ValueError(f"taxonomy CSV header must be {','.join(TAXONOMY_HEADER)}")
        recs = sorted(
            (TaxonRecord(int(r["class_id"]), r["scientific_name"], r["common_name"], r["genus"],
                         r["family"], int(r["image_count"])) for r in rows),
            key=lambda t: t.class_id,
        )
        return cls(tuple(recs), name)

    def to_dict(self) -> dict:
        return {"name": self.name, "taxa": [
            [t.scientific_name, t.common_name, t.genus, t.family, t.image_count] for t in self.taxa]}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassSet":
        return cls(tuple(TaxonRecord(i, *row) for i, row in enumerate(d["taxa"])), d.get("name", ""))


@dataclass(frozen=True)
class LabeledExample:
    example_id: str
    image: np.ndarray
    label: int
    strata_tags: frozenset[str] = field(default_factory=frozenset)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[LabeledExample, ...]
    test: tuple[LabeledExample, ...]
    per_class_test_count: int
    val: tuple[LabeledExample, ...] = ()

    def to_ndjson(self) -> str:
        lines = []
        for name, part in (("train", self.train), ("test", self.test), ("val", self.val)):
            lines.extend(json.dumps({"example_id": ex.example_id, "split": name}) for ex in part)
        return "".join(line + "\n" for line in sorted(lines))


def filter_species(candidates: Sequence[TaxonRecord], min_images: int, name: str = "") -> ClassSet:
    """Keep taxa with at least ``min_images`` images; order preserved, ids re-densified."""
    if min_images < 0:
        raise ValueError("min_images must be >= 0")
    return ClassSet.from_records((t for t in candidates if t.image_count >= min_images), name)


def taxonomy_lookup(class_set: ClassSet, class_id: int) -> TaxonRecord:
    if not 0 <= class_id < len(class_set.taxa):
        raise UnknownClass(class_id)
    return class_set.taxa[class_id]


def split_dataset(examples: Sequence[LabeledExample], per_class_test: int, seed: int,
                  with_val: bool = False) -> DatasetSplit:
    """Hold out ``per_class_test`` examples per class, sampled without replacement.

    With ``with_val`` the held-out examples of each class are halved into
    test (first half, rounded up) and validation.
    """
    by_class: dict[int, list[int]] = defaultdict(list)
    for i, ex in enumerate(examples):
        by_class[ex.label].append(i)
    rng = np.random.default_rng(seed)
    held: dict[int, list[int]] = {}
    for c in sorted(by_class):
        idx = by_class[c]
        if len(idx) <= per_class_test:
            raise InsufficientExamples(c, len(idx), per_class_test)
        pick = rng.choice(len(idx), size=per_class_test, replace=False)
        held[c] = [idx[j] for j in sorted(pick)]
    held_set = {i for v in held.values() for i in v}
    train = tuple(ex for i, ex in enumerate(examples) if i not in held_set)
    test, val = [], []
    for c in sorted(held):
        cut = (len(held[c]) + 1) // 2 if with_val else len(held[c])
        test.extend(examples[i] for i in held[c][:cut])
        val.extend(examples[i] for i in held[c][cut:])
    return DatasetSplit(train, tuple(test), per_class_test, tuple(val))


@dataclass(frozen=True)
class Corpus:
    """Array-backed collection of labeled images sharing one ClassSet."""

    images: np.ndarray
    labels: np.ndarray
    example_ids: tuple[str, ...]
    tags: tuple[frozenset, ...]
    class_set: ClassSet
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.labels)
        if not (len(self.images) == n == len(self.example_ids) == len(self.tags)):
            raise ValueError("corpus fields must have equal length")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_set)):
            raise ValueError("label outside the class set")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_set)

    def examples(self) -> list[LabeledExample]:
        return [LabeledExample(self.example_ids[i], self.images[i], int(self.labels[i]), self.tags[i])
                for i in range(len(self))]

    def take(self, idx) -> "Corpus":
        idx = np.asarray(idx, dtype=int)
        return Corpus(self.images[idx], self.labels[idx], tuple(self.example_ids[i] for i in idx),
                      tuple(self.tags[i] for i in idx), self.class_set, dict(self.meta))

    def concat(self, other: "Corpus") -> "Corpus":
        # counts may differ between corpora; the species list must not
        if other.class_set.names != self.class_set.names:
            raise ValueError("cannot concatenate corpora with different class sets")
        return Corpus(np.concatenate([self.images, other.images]), np.concatenate([self.labels, other.labels]),
                      self.example_ids + other.example_ids, self.tags + other.tags, self.class_set,
                      dict(self.meta))

    def restrict(self, names: Sequence[str], name: str = "") -> "Corpus":
        """Examples of the named classes only, relabelled densely in ``names`` order."""
        old = [self.class_set.index_of(n) for n in names]
        sub = ClassSet.from_records((self.class_set.taxa[i] for i in old), name or self.class_set.name)
        remap = np.full(self.num_classes, -1)
        remap[old] = np.arange(len(old))
        idx = np.nonzero(remap[self.labels] >= 0)[0]
        part = self.take(idx)
        return Corpus(part.images, remap[part.labels], part.example_ids, part.tags, sub, part.meta)

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample], class_set: ClassSet, meta=None) -> "Corpus":
        images = np.stack([ex.image for ex in examples]) if examples else np.zeros((0, 1, 1, 1))
        return cls(images, np.array([ex.label for ex in examples], dtype=int),
                   tuple(ex.example_id for ex in examples), tuple(frozenset(ex.strata_tags) for ex in examples),
                   class_set, dict(meta or {}))

    def split(self, per_class_test: int, seed: int) -> tuple["Corpus", "Corpus"]:
        """Train/test corpora via :func:`split_dataset`."""
        s = split_dataset(self.examples(), per_class_test, seed)
        pos = {eid: i for i, eid in enumerate(self.example_ids)}
        return (self.take([pos[e.example_id] for e in s.train]),
                self.take([pos[e.example_id] for e in s.test]))

    def per_class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    # serialization -------------------------------------------------------

    def header(self) -> dict:
        return {"format": "trustvision-corpus/1", "class_set": self.class_set.to_dict(),
                "example_ids": list(self.example_ids), "tags": [sorted(t) for t in self.tags],
                "meta": self.meta}

    def save(self, path) -> str:
        return container.write(path, self.header(),
                               {"images": self.images, "labels": self.labels.astype(np.float64)})

    def digest(self) -> str:
        data = container.encode(self.header(), {"images": self.images, "labels": self.labels.astype(np.float64)})
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def load(cls, path) -> "Corpus":
        header, arrays = container.read(path)
        return cls(arrays["images"], arrays["labels"].astype(int), tuple(header["example_ids"]),
                   tuple(frozenset(t) for t in header["tags"]), ClassSet.from_dict(header["class_set"]),
                   header.get("meta", {}))
