"""Zero-, few- and full-shot transfer evaluation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ..core import ClassSet, Corpus, InsufficientExamples
from ..evalkit.reports import aligned_table
from ..nnkit.vit import ModelCheckpoint, predict_proba
from .stages import finetune_classifier


class MissingMapping(KeyError):
    pass


@dataclass(frozen=True)
class KShotSpec:
    k: int | str
    trials: int = 5
    seed: int = 0
    class_mapping: dict | None = None
    finetune_encoder: bool | None = None

    def __post_init__(self):
        if self.k != "all" and (not isinstance(self.k, (int, np.integer)) or self.k < 0):
            raise ValueError("k must be a nonnegative integer or 'all'")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")

    @property
    def full_encoder(self) -> bool:
        """Head-only for finite k unless overridden; the whole model for k='all'."""
        if self.finetune_encoder is not None:
            return self.finetune_encoder
        return self.k == "all"


@dataclass(frozen=True)
class KShotResult:
    dataset: str
    classes: int
    k: int | str
    accuracies: list = field(default_factory=list)
    n_eval: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def sd(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "classes": self.classes, "k": self.k, "mean": self.mean,
                "sd": self.sd, "accuracies": list(self.accuracies), "n_eval": self.n_eval}


def name_mapping(target: ClassSet, source: ClassSet) -> dict[int, int]:
    """Target id -> source id for classes whose scientific names match exactly."""
    src = {t.scientific_name: t.class_id for t in source.taxa}
    return {t.class_id: src[t.scientific_name] for t in target.taxa if t.scientific_name in src}


def read_mapping_csv(text: str, target: ClassSet, source: ClassSet) -> dict[int, int]:
    """Rows of ``target,source`` given as ids or scientific names; a header row is optional."""
    out = {}
    for row in csv.reader(io.StringIO(text)):
        if not row or row[0].strip().lower() in ("target", "target_id", "target_name"):
            continue
        a, b = row[0].strip(), row[1].strip()
        out[int(a) if a.isdigit() else target.index_of(a)] = int(b) if b.isdigit() else source.index_of(b)
    return out


def support_indices(labels, k: int, seed) -> np.ndarray:
    """k examples per class drawn without replacement, in class order."""
    labels = np.asarray(labels, dtype=int)
    rng = np.random.default_rng(seed)
    out = []
    for c in np.unique(labels):
        pool = np.nonzero(labels == c)[0]
        if pool.size < k:
            raise InsufficientExamples(int(c), int(pool.size), k)
        out.append(np.sort(rng.choice(pool, size=k, replace=False)))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def zero_shot_accuracy(ckpt: ModelCheckpoint, test: Corpus, mapping: dict[int, int]) -> tuple[float, int]:
    """Source-model accuracy on the test examples whose label is mapped."""
    keep = np.array([int(l) in mapping for l in test.labels], dtype=bool)
    if not keep.any():
        raise MissingMapping("no test example has a mapped label")
    probs = predict_proba(ckpt, test.images[keep])
    want = np.array([mapping[int(l)] for l in test.labels[keep]])
    return float((np.argmax(probs, axis=1) == want).mean()), int(keep.sum())


def kshot_evaluate(ckpt: ModelCheckpoint, train: Corpus, test: Corpus, spec: KShotSpec, *,
                   epochs: int = 10, dataset: str = "", **finetune_kwargs) -> KShotResult:
    """Evaluate transfer of ``ckpt`` onto the target task given by ``train``/``test``.

    Trial ``t`` uses seed ``(spec.seed, t)`` for its support set and training.
    """
    name = dataset or test.class_set.name
    C = test.num_classes
    if spec.k == 0:
        if spec.class_mapping is None:
            raise MissingMapping("k=0 needs a class mapping")
        acc, n = zero_shot_accuracy(ckpt, test, spec.class_mapping)
        return KShotResult(name, C, 0, [acc], n)
    accs = []
    for t in range(spec.trials):
        seed = int(np.random.SeedSequence([spec.seed, t]).generate_state(1)[0])
        if spec.k == "all":
            support = train
        else:
            support = train.take(support_indices(train.labels, int(spec.k), seed))
        _, rep = finetune_classifier(ckpt, support, epochs, seed, test=test, head_only=not spec.full_encoder,
                                     **finetune_kwargs)
        accs.append(rep.top1)
    return KShotResult(name, C, spec.k, accs, len(test))


def kshot_table(results: list[KShotResult], ks=(0, 10, 20, "all")) -> list[dict]:
    """One row per dataset with a column per k, as percentages."""
    rows: dict[str, dict] = {}
    for r in results:
        row = rows.setdefault(r.dataset, {"dataset": r.dataset, "classes": r.classes,
                                          **{f"k={k}": None for k in ks}})
        row[f"k={r.k}"] = 100.0 * r.mean
    return list(rows.values())


def kshot_text(results: list[KShotResult], ks=(0, 10, 20, "all")) -> str:
    return aligned_table(kshot_table(results, ks), floatfmt="{:.1f}")
