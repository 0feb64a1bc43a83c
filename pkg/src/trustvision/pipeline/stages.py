"""Training stages: MAE pretraining, fine-tuning, global-to-local, expert refinement."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..core import ClassSet, Corpus, UnknownClass
from ..evalkit.metrics import evaluate_probs
from ..evalkit.reports import per_class_report
from ..nnkit.augment import FINETUNE_DEFAULT, NO_AUGMENT, AugmentPolicy, augment_batch, one_hot
from ..nnkit.layers import log_softmax, softmax_stable
from ..nnkit.optim import OptimHyper, OptimState, adamw_update, cosine_lr, optimizer_step
from ..nnkit.vit import (
    ArchConfig,
    ModelCheckpoint,
    backprop,
    classify_loss,
    embed,
    init_checkpoint,
    mae_forward_loss,
    predict_proba,
    with_new_head,
)

log = logging.getLogger(__name__)

PRETRAIN_HYPER = OptimHyper(base_lr=2e-3, weight_decay=0.05, layerwise_decay=1.0, betas=(0.9, 0.95))
FINETUNE_HYPER = OptimHyper()
HEAD_HYPER = OptimHyper(base_lr=1e-2, weight_decay=0.02, layerwise_decay=1.0)


class ClassCountMismatch(ValueError):
    pass


class UnknownSubsetClass(KeyError):
    pass


@dataclass(frozen=True)
class StageReport:
    stage: str
    dataset: str
    top1: float
    top5: float
    per_class: list
    n_test: int
    checkpoint: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _lineage(ckpt: ModelCheckpoint, entry: dict) -> dict:
    meta = dict(ckpt.meta)
    meta["lineage"] = list(meta.get("lineage", [])) + [entry]
    return meta


def _batches(n: int, batch_size: int, rng, drop_last: bool = False):
    perm = rng.permutation(n)
    stop = n - (n % batch_size) if drop_last and n >= batch_size else n
    for i in range(0, stop, batch_size):
        yield perm[i:i + batch_size]


def stage_report(stage: str, ckpt: ModelCheckpoint, test: Corpus, dataset: str = "") -> StageReport:
    probs = predict_proba(ckpt, test.images)
    rep, cm = evaluate_probs(probs, test.labels, test.num_classes, test.class_set)
    pcr = per_class_report(cm, np.zeros(test.num_classes, dtype=int))
    return StageReport(stage, dataset or test.class_set.name, rep.top1, rep.top5,
                       [r.accuracy for r in pcr.rows], len(test), ckpt.digest()[:16])


# ---------------------------------------------------------------------------
# pretraining


def pretrain_mae(corpus: Corpus, arch: ArchConfig, steps: int, seed: int, *, batch_size: int = 32,
                 hyper: OptimHyper = PRETRAIN_HYPER, warmup: int | None = None,
                 init: ModelCheckpoint | None = None) -> tuple[ModelCheckpoint, list[float]]:
    """Masked-autoencoder pretraining; labels are ignored.

    ``init`` continues from an earlier checkpoint (second-stage pretraining).
    The mask is resampled every step from ``(seed, step)``.
    """
    if len(corpus) == 0:
        raise ValueError("pretraining corpus is empty")
    arch = dataclasses.replace(arch, num_classes=0)
    if init is None:
        ckpt = init_checkpoint(arch, seed)
    else:
        if not init.has_decoder:
            raise ValueError("continued pretraining needs a checkpoint with a decoder")
        ckpt = init
    parent = ckpt.digest()
    if steps == 0:
        return ckpt, []
    state = OptimState(hyper)
    rng = np.random.default_rng([seed, 11])
    warmup = max(1, steps // 10) if warmup is None else warmup
    losses = []
    n = len(corpus)
    bs = min(batch_size, n)
    order = iter(())
    for step in range(steps):
        idx = next(order, None)
        if idx is None:
            order = _batches(n, bs, rng, drop_last=True)
            idx = next(order)
        res = mae_forward_loss(ckpt, corpus.images[idx], seed=[seed, step, 1], train=True,
                               drop_seed=[seed, step, 2])
        grads = backprop(res.cache, "mae")
        ckpt, state = optimizer_step(state, ckpt, grads, lr_mult=cosine_lr(step, steps, warmup))
        losses.append(res.loss)
    meta = _lineage(ckpt, {"stage": "pretrained", "parent": parent, "seed": seed, "steps": steps,
                           "batch_size": bs, "corpus": corpus.digest()[:16]})
    return ckpt.evolve(stage="pretrained", meta=meta), losses


def smoothed(losses, window: int = 20) -> np.ndarray:
    losses = np.asarray(losses, dtype=float)
    if losses.size < window:
        return losses.copy()
    return np.convolve(losses, np.ones(window) / window, mode="valid")


# ---------------------------------------------------------------------------
# supervised


def _train_full(ckpt: ModelCheckpoint, train: Corpus, epochs: int, seed: int, batch_size: int,
                hyper: OptimHyper, policy: AugmentPolicy) -> ModelCheckpoint:
    n = len(train)
    if n == 0 or epochs == 0:
        return ckpt
    bs = min(batch_size, n)
    steps_per_epoch = -(-n // bs)
    total = epochs * steps_per_epoch
    warmup = max(1, total // 10)
    state = OptimState(hyper)
    rng = np.random.default_rng([seed, 23])
    C = ckpt.arch.num_classes
    step = 0
    for _ in range(epochs):
        for idx in _batches(n, bs, rng):
            x, soft = augment_batch(train.images[idx], policy, [seed, step, 3], train.labels[idx], C)
            _, cache = classify_loss(ckpt, x, soft if policy.mixes else train.labels[idx], train=True,
                                     seed=[seed, step, 4])
            grads = backprop(cache, cache.kind)
            ckpt, state = optimizer_step(state, ckpt, grads, lr_mult=cosine_lr(step, total, warmup))
            step += 1
    return ckpt


def fit_head(ckpt: ModelCheckpoint, train: Corpus, seed: int, *, steps: int = 300,
             hyper: OptimHyper = HEAD_HYPER) -> ModelCheckpoint:
    """Train only the linear head on frozen embeddings (full batch).

    Features are standardised while fitting and the scaling is folded back
    into the head, so the probe converges alike for any feature scale.
    """
    feats = embed(ckpt, train.images)
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0) + 1e-6
    z = (feats - mu) / sd
    soft = one_hot(train.labels, ckpt.arch.num_classes)
    p = {"head.w": ckpt.params["head.w"] * sd[:, None], "head.b": ckpt.params["head.b"] + mu @ ckpt.params["head.w"]}
    state = OptimState(hyper)
    n = len(train)
    for step in range(steps):
        logits = z @ p["head.w"] + p["head.b"]
        d = (np.exp(log_softmax(logits)) - soft) / n
        grads = {"head.w": z.T @ d, "head.b": d.sum(0)}
        p, state = adamw_update(state, p, grads, lr_mult=cosine_lr(step, steps, 0))
    params = dict(ckpt.params)
    params["head.w"] = p["head.w"] / sd[:, None]
    params["head.b"] = p["head.b"] - (mu / sd) @ p["head.w"]
    return ckpt.evolve(params=params)


def prepare_head(ckpt: ModelCheckpoint, num_classes: int, seed: int) -> ModelCheckpoint:
    if ckpt.has_head:
        if ckpt.arch.num_classes != num_classes:
            raise ClassCountMismatch(f"head has {ckpt.arch.num_classes} outputs, corpus has {num_classes} classes")
        return with_new_head(ckpt, num_classes, seed) if ckpt.has_decoder else ckpt
    return with_new_head(ckpt, num_classes, seed)


def finetune_classifier(ckpt: ModelCheckpoint, corpus: Corpus, epochs: int = 10, seed: int = 0, *,
                        test: Corpus | None = None, per_class_test: int = 20, batch_size: int = 16,
                        hyper: OptimHyper = FINETUNE_HYPER, policy: AugmentPolicy = FINETUNE_DEFAULT,
                        head_only: bool = False, stage: str = "finetuned",
                        dataset: str = "") -> tuple[ModelCheckpoint, StageReport]:
    """End-to-end fine-tuning (decoder dropped, encoder unfrozen) plus a held-out report.

    Without ``test``, ``per_class_test`` examples per class are held out
    from ``corpus`` using ``seed``.
    """
    if ckpt.arch.image_size != corpus.images.shape[1] or ckpt.arch.in_chans != corpus.images.shape[3]:
        raise ClassCountMismatch("checkpoint architecture does not match corpus images")
    if test is None:
        train, test = corpus.split(per_class_test, seed)
    else:
        train = corpus
    if test.num_classes != train.num_classes:
        raise ClassCountMismatch("train and test class sets differ")
    parent = ckpt.digest()
    model = prepare_head(ckpt, train.num_classes, seed)
    if head_only:
        model = fit_head(model, train, seed)
    else:
        model = _train_full(model, train, epochs, seed, batch_size, hyper, policy)
    meta = _lineage(model, {"stage": stage, "parent": parent, "seed": seed, "epochs": epochs,
                            "head_only": head_only, "train": train.digest()[:16], "test": test.digest()[:16]})
    meta["class_set"] = train.class_set.to_dict()
    model = model.evolve(stage=stage, meta=meta)
    return model, stage_report(stage, model, test, dataset)


def restricted_accuracy(global_ckpt: ModelCheckpoint, global_classes: ClassSet, corpus: Corpus) -> float:
    """Top-1 of the global model when its argmax is limited to the corpus's classes."""
    cols = [global_classes.index_of(n) for n in corpus.class_set.names]
    probs = predict_proba(global_ckpt, corpus.images)[:, cols]
    return float((np.argmax(probs, axis=1) == corpus.labels).mean())


def global_to_local(global_ckpt: ModelCheckpoint, global_classes: ClassSet, subset: ClassSet, local: Corpus,
                    epochs: int = 10, seed: int = 0, *, test: Corpus | None = None,
                    **kwargs) -> tuple[ModelCheckpoint, StageReport]:
    """Re-initialise the head at ``len(subset)`` outputs and fine-tune on the local corpus."""
    known = set(global_classes.names)
    missing = [n for n in subset.names if n not in known]
    if missing:
        raise UnknownSubsetClass(missing)
    if local.class_set.names != subset.names:
        raise ClassCountMismatch("local corpus classes must match the subset")
    start = with_new_head(global_ckpt, len(subset), seed)
    start = start.evolve(meta=dict(global_ckpt.meta))
    return finetune_classifier(start, local, epochs, seed, test=test, stage="local", **kwargs)


@dataclass(frozen=True)
class RefineRow:
    class_id: int
    name: str
    images_added: int
    acc_before: float | None
    acc_after: float | None

    @property
    def delta(self) -> float:
        if self.acc_before is None or self.acc_after is None:
            return 0.0
        return self.acc_after - self.acc_before


@dataclass(frozen=True)
class RefineReport:
    rows: list[RefineRow] = field(default_factory=list)

    def to_rows(self) -> list[dict]:
        return [{"class": r.name, "images_added": r.images_added, "acc_before": r.acc_before,
                 "acc_after": r.acc_after, "delta": r.delta} for r in self.rows]


def refine_with_expert(local_ckpt: ModelCheckpoint, train: Corpus, extra: Corpus, test: Corpus,
                       epochs: int = 5, seed: int = 0, **kwargs) -> tuple[ModelCheckpoint, RefineReport]:
    """Continue fine-tuning on ``train`` plus expert ``extra`` images; report per-class change."""
    if extra.class_set.names != train.class_set.names:
        raise UnknownClass([n for n in extra.class_set.names if n not in train.class_set.names] or "class set")
    if len(extra) and extra.labels.max() >= train.num_classes:
        raise UnknownClass(int(extra.labels.max()))
    before = stage_report("before", local_ckpt, test)
    union = train.concat(extra) if len(extra) else train
    if epochs == 0:
        model = local_ckpt
    else:
        kwargs.setdefault("policy", FINETUNE_DEFAULT)
        model, _ = finetune_classifier(local_ckpt, union, epochs, seed, test=test, stage="local", **kwargs)
    after = stage_report("after", model, test)
    added = np.bincount(extra.labels, minlength=train.num_classes) if len(extra) else np.zeros(train.num_classes, int)
    rows = [RefineRow(i, train.class_set.taxa[i].scientific_name, int(added[i]), before.per_class[i],
                      after.per_class[i]) for i in range(train.num_classes)]
    return model, RefineReport(rows)


def weakest_class(report: StageReport) -> int:
    accs = [(a if a is not None else 2.0, i) for i, a in enumerate(report.per_class)]
    return min(accs)[1]


__all__ = [
    "ClassCountMismatch", "UnknownSubsetClass", "StageReport", "RefineReport", "RefineRow",
    "pretrain_mae", "finetune_classifier", "fit_head", "global_to_local", "refine_with_expert",
    "restricted_accuracy", "stage_report", "smoothed", "weakest_class", "NO_AUGMENT", "softmax_stable",
]
