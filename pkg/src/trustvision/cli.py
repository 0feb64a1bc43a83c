"""Command-line entry point: ``trustvision <command> ...``.

Exit status is 0 on success, 1 when the operation fails and 2 on a usage
error.  Every command that writes files also writes a run manifest
(``<primary output>.run.json``) listing its arguments, seed, resolved
configuration and the SHA-256 of each input and output.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import ClassSet, Corpus, CoreError, TaxonRecord
from .evalkit import plots
from .evalkit.metrics import evaluate_probs
from .evalkit.reports import aligned_table, attribute_errors, dumps, per_class_report, rows_to_csv, strata_report
from .nnkit.layers import softmax_stable
from .nnkit.vit import ModelCheckpoint, predict_logits
from .pipeline import config as cfgmod
from .pipeline.kshot import KShotSpec, kshot_evaluate, kshot_table, name_mapping, read_mapping_csv
from .pipeline.stages import finetune_classifier, global_to_local, pretrain_mae, refine_with_expert
from .pipeline.synth import generate_ood, generate_synthetic
from .trust import (
    TrustCalibration,
    calibrate_conformal,
    calibrate_ood,
    energy_score,
    evaluate_coverage,
)

log = logging.getLogger("trustvision")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return "sha256:" + h.hexdigest()


class Run:
    """Collects inputs and outputs of one command for its run manifest."""

    def __init__(self, args, cfg):
        self.args, self.cfg = args, cfg
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}

    def read(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"input not found: {path}")
        if path.is_file():
            self.inputs[str(path)] = sha256_file(path)
        return path

    def wrote(self, path) -> Path:
        path = Path(path)
        self.outputs[str(path)] = sha256_file(path)
        return path

    def write_text(self, path, text: str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        return self.wrote(path)

    def finish(self, primary) -> Path:
        args = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(self.args).items())
                if k not in ("func",)}
        doc = {"tool": "trustvision", "version": __version__, "command": self.args.command_path,
               "args": args, "seed": getattr(self.args, "seed", None), "config": self.cfg,
               "inputs": dict(sorted(self.inputs.items())), "outputs": dict(sorted(self.outputs.items()))}
        path = Path(str(primary) + ".run.json")
        path.write_text(json.dumps(doc, sort_keys=True, indent=2, default=str) + "\n", encoding="utf-8")
        return path


def emit(args, payload: dict, text: str | None = None) -> None:
    if args.json:
        sys.stdout.write(dumps(payload))
    else:
        sys.stdout.write(text if text is not None else dumps(payload))


def load_corpus(run: Run, path) -> Corpus:
    return Corpus.load(run.read(path))


def load_model(run: Run, path) -> ModelCheckpoint:
    return ModelCheckpoint.load(run.read(path))


def model_classes(ckpt: ModelCheckpoint) -> ClassSet:
    meta = ckpt.meta.get("class_set")
    return ClassSet.from_dict(meta) if meta else ClassSet.generic(ckpt.arch.num_classes)


def load_calibration(run: Run, paths) -> TrustCalibration:
    calib = TrustCalibration()
    for p in paths or []:
        calib = calib.merged(TrustCalibration.load(run.read(p)))
    return calib


def parse_lookalike(text: str) -> tuple[int, int, float]:
    try:
        a, b, s = text.split(":")
        return int(a), int(b), float(s)
    except ValueError:
        raise argparse.ArgumentTypeError("lookalike pairs look like A:B:STRENGTH") from None


def parse_k(text: str):
    if text == "all":
        return "all"
    try:
        k = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("k must be a nonnegative integer or 'all'") from None
    if k < 0:
        raise argparse.ArgumentTypeError("k must be >= 0")
    return k


def probs_and_logits(ckpt, corpus):
    logits = predict_logits(ckpt, corpus.images)
    return softmax_stable(logits), logits


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg) -> int:
    run = Run(args, cfg)
    s = cfg["synth"]
    seed = s["seed"] if args.seed is None else args.seed
    args.seed = seed
    if args.ood:
        imgs = generate_ood(args.ood, s["image_size"], seed, s["channels"])
        cs = ClassSet((TaxonRecord(0, "Outofdistribution ignota", "unknown", family="none"),), "ood")
        corpus = Corpus(imgs, np.zeros(len(imgs), dtype=int), tuple(f"ood-{seed}-{i:05d}" for i in range(len(imgs))),
                        tuple(frozenset() for _ in imgs), cs, {"kind": "ood", "seed": seed})
    else:
        conf = cfgmod.synth_from_config(
            cfg, seed=seed,
            num_classes=args.classes or s["num_classes"],
            examples_per_class=args.per_class or s["examples_per_class"],
            intra_class_variation=s["intra_class_variation"] if args.variation is None else args.variation,
            lookalike_pairs=tuple(args.lookalike or ()), class_offset=args.class_offset, name=args.name)
        corpus = generate_synthetic(conf)
    outputs = {}
    if args.test_per_class:
        train, test = corpus.split(args.test_per_class, seed)
        train.save(args.out)
        test.save(args.test_out)
        outputs["train"], outputs["test"] = str(run.wrote(args.out)), str(run.wrote(args.test_out))
    else:
        corpus.save(args.out)
        outputs["corpus"] = str(run.wrote(args.out))
    run.finish(args.out)
    emit(args, {"examples": len(corpus), "classes": corpus.num_classes, "outputs": run.outputs},
         f"wrote {len(corpus)} examples over {corpus.num_classes} classes\n")
    return 0


def cmd_pretrain(args, cfg) -> int:
    run = Run(args, cfg)
    p = cfg["pretrain"]
    seed = p["seed"] if args.seed is None else args.seed
    args.seed = seed
    corpus = load_corpus(run, args.corpus)
    init = load_model(run, args.init) if args.init else None
    arch = init.arch if init else cfgmod.arch_from_config(cfg)
    if arch.image_size != corpus.images.shape[1] or arch.in_chans != corpus.images.shape[3]:
        raise UsageError("model image size/channels do not match the corpus")
    steps = p["steps"] if args.steps is None else args.steps
    ckpt, losses = pretrain_mae(corpus, arch, steps, seed, batch_size=p["batch_size"],
                                hyper=cfgmod.pretrain_hyper(cfg), init=init)
    ckpt.save(args.out)
    run.wrote(args.out)
    if args.loss_trace:
        run.write_text(args.loss_trace, "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses)))
    run.finish(args.out)
    first = float(np.mean(losses[:20])) if losses else None
    last = float(np.mean(losses[-20:])) if losses else None
    emit(args, {"steps": steps, "loss_first20": first, "loss_last20": last, "outputs": run.outputs},
         f"pretrained {steps} steps; loss {first} -> {last}\n")
    return 0


def _stage_common(args, cfg):
    f = cfg["finetune"]
    seed = f["seed"] if args.seed is None else args.seed
    args.seed = seed
    epochs = f["epochs"] if args.epochs is None else args.epochs
    kwargs = dict(batch_size=f["batch_size"], hyper=cfgmod.finetune_hyper(cfg))
    return seed, epochs, kwargs


def _write_stage(args, run, ckpt, report) -> int:
    ckpt.save(args.out)
    run.wrote(args.out)
    payload = report.to_dict()
    if args.report:
        run.write_text(args.report, dumps(payload))
    run.finish(args.out)
    text = aligned_table([{"stage": report.stage, "dataset": report.dataset, "top1": report.top1,
                           "top5": report.top5, "n_test": report.n_test}])
    emit(args, payload, text)
    return 0


def cmd_finetune(args, cfg) -> int:
    run = Run(args, cfg)
    seed, epochs, kwargs = _stage_common(args, cfg)
    ckpt = load_model(run, args.model)
    corpus = load_corpus(run, args.corpus)
    test = load_corpus(run, args.test) if args.test else None
    model, report = finetune_classifier(ckpt, corpus, epochs, seed, test=test,
                                        per_class_test=cfg["finetune"]["per_class_test"],
                                        head_only=args.head_only, **kwargs)
    return _write_stage(args, run, model, report)


def cmd_local(args, cfg) -> int:
    run = Run(args, cfg)
    seed, epochs, kwargs = _stage_common(args, cfg)
    ckpt = load_model(run, args.model)
    corpus = load_corpus(run, args.corpus)
    test = load_corpus(run, args.test) if args.test else None
    model, report = global_to_local(ckpt, model_classes(ckpt), corpus.class_set, corpus, epochs, seed, test=test,
                                    per_class_test=cfg["finetune"]["per_class_test"], **kwargs)
    return _write_stage(args, run, model, report)


def cmd_refine(args, cfg) -> int:
    run = Run(args, cfg)
    seed, epochs, kwargs = _stage_common(args, cfg)
    ckpt = load_model(run, args.model)
    train, extra, test = (load_corpus(run, p) for p in (args.corpus, args.extra, args.test))
    model, rep = refine_with_expert(ckpt, train, extra, test, epochs, seed, **kwargs)
    model.save(args.out)
    run.wrote(args.out)
    rows = rep.to_rows()
    if args.report:
        run.write_text(args.report, dumps({"rows": rows}))
    run.finish(args.out)
    emit(args, {"rows": rows}, aligned_table(rows))
    return 0


def cmd_kshot(args, cfg) -> int:
    run = Run(args, cfg)
    k = cfg["kshot"]
    seed = k["seed"] if args.seed is None else args.seed
    args.seed = seed
    ckpt = load_model(run, args.model)
    test = load_corpus(run, args.test)
    train = load_corpus(run, args.train) if args.train else None
    results = []
    for kval in args.k:
        mapping = None
        if kval == 0:
            if args.mapping:
                mapping = read_mapping_csv(run.read(args.mapping).read_text(encoding="utf-8"), test.class_set,
                                           model_classes(ckpt))
            else:
                mapping = name_mapping(test.class_set, model_classes(ckpt)) or None
        elif train is None:
            raise UsageError("k > 0 needs --train")
        spec = KShotSpec(kval, trials=args.trials or k["trials"], seed=seed, class_mapping=mapping,
                         finetune_encoder=args.finetune_encoder)
        results.append(kshot_evaluate(ckpt, train if train is not None else test, test, spec,
                                      epochs=k["epochs"], dataset=args.dataset or test.class_set.name))
    payload = {"results": [r.to_dict() for r in results], "table": kshot_table(results)}
    if args.report:
        run.write_text(args.report, dumps(payload))
        run.finish(args.report)
    emit(args, payload, aligned_table(kshot_table(results), floatfmt="{:.1f}"))
    return 0


def cmd_calibrate(args, cfg) -> int:
    run = Run(args, cfg)
    t = cfg["trust"]
    args.seed = 0 if args.seed is None else args.seed
    ckpt = load_model(run, args.model)
    if args.kind == "conformal":
        corpus = load_corpus(run, args.corpus)
        probs, _ = probs_and_logits(ckpt, corpus)
        alpha = t["alpha"] if args.alpha is None else args.alpha
        calib = TrustCalibration(conformal=calibrate_conformal(probs, corpus.labels, alpha))
        payload = calib.to_dict()["conformal"]
    else:
        id_c = load_corpus(run, args.id)
        ood_c = load_corpus(run, args.ood)
        _, id_logits = probs_and_logits(ckpt, id_c)
        _, ood_logits = probs_and_logits(ckpt, ood_c)
        temps = tuple(args.temperatures) if args.temperatures else cfgmod.temperatures(cfg)
        tpr = t["target_tpr"] if args.target_tpr is None else args.target_tpr
        ood, metrics = calibrate_ood(id_logits, ood_logits, temps, tpr, seed=args.seed)
        calib = TrustCalibration(ood=ood)
        payload = {**calib.to_dict()["ood"], "metrics": metrics}
    calib.save(args.out)
    run.wrote(args.out)
    run.finish(args.out)
    emit(args, payload)
    return 0


def _evaluate(ckpt, corpus, calib, train_counts=None) -> dict:
    probs, logits = probs_and_logits(ckpt, corpus)
    rep, cm = evaluate_probs(probs, corpus.labels, corpus.num_classes, corpus.class_set)
    counts = np.zeros(corpus.num_classes, dtype=int) if train_counts is None else train_counts
    pcr = per_class_report(cm, counts)
    out = {"metrics": rep.to_dict(), "per_class": pcr.to_dict(), "confusion": cm.to_rows(),
           "strata": strata_report(probs, corpus.labels, corpus.tags, corpus.num_classes).to_dict(),
           "attribution": [vars(a) for a in attribute_errors(cm, corpus.class_set, counts)]}
    if calib.conformal is not None:
        out["conformal"] = evaluate_coverage(probs, corpus.labels, calib.conformal)
    if calib.ood is not None:
        e = energy_score(logits, calib.ood.temperature)
        out["ood"] = {"flagged_fraction": float((e > calib.ood.threshold).mean()), "n": int(e.size)}
    return out


def cmd_evaluate(args, cfg) -> int:
    run = Run(args, cfg)
    ckpt = load_model(run, args.model)
    corpus = load_corpus(run, args.corpus)
    train = load_corpus(run, args.train) if args.train else None
    calib = load_calibration(run, args.calib)
    out = _evaluate(ckpt, corpus, calib, None if train is None else train.per_class_counts())
    run.write_text(args.out, dumps(out))
    run.finish(args.out)
    m = out["metrics"]
    emit(args, out, aligned_table([{k: m[k] for k in ("accuracy", "macro_precision", "macro_recall", "macro_f1",
                                                        "top5", "n_examples")}]))
    return 0


def cmd_report(args, cfg) -> int:
    run = Run(args, cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = load_model(run, args.model)
    corpus = load_corpus(run, args.corpus)
    train = load_corpus(run, args.train) if args.train else None
    calib = load_calibration(run, args.calib)
    counts = None if train is None else train.per_class_counts()
    out = _evaluate(ckpt, corpus, calib, counts)
    run.write_text(out_dir / "report.json", dumps(out))
    run.write_text(out_dir / "per_class.csv", rows_to_csv(out["per_class"]["rows"]))
    run.write_text(out_dir / "strata.csv", rows_to_csv(out["strata"]["rows"]))
    run.write_text(out_dir / "attribution.csv", rows_to_csv(out["attribution"]) or "source\n")
    names = corpus.class_set.names
    conf_rows = [{"true": names[i], **{names[j]: v for j, v in enumerate(r)}} for i, r in enumerate(out["confusion"])]
    run.write_text(out_dir / "confusion.csv", rows_to_csv(conf_rows, ["true"] + names))
    accs = [r["accuracy"] for r in out["per_class"]["rows"]]
    run.wrote(plots.accuracy_histogram(accs, out_dir / "accuracy_hist.svg"))
    if train is not None:
        pts = [(r["train_count"], r["accuracy"]) for r in out["per_class"]["rows"] if r["accuracy"] is not None]
        run.wrote(plots.accuracy_vs_train_count(pts, out_dir / "accuracy_vs_train.svg"))
        run.wrote(plots.class_counts(train.class_set.names, train.per_class_counts(), out_dir / "class_counts.svg"))
    if args.ood and calib.ood is not None:
        ood_c = load_corpus(run, args.ood)
        _, id_logits = probs_and_logits(ckpt, corpus)
        _, ood_logits = probs_and_logits(ckpt, ood_c)
        e_id = energy_score(id_logits, calib.ood.temperature)
        e_ood = energy_score(ood_logits, calib.ood.temperature)
        run.wrote(plots.energy_boxplot(e_id, e_ood, calib.ood.threshold, out_dir / "energy_box.svg"))
        from .evalkit.curves import roc_pr

        curve = roc_pr(-e_id, -e_ood, level=calib.ood.target_tpr)
        run.wrote(plots.roc_curve(curve.fpr, curve.tpr, out_dir / "roc.svg", calib.ood.target_tpr))
        run.write_text(out_dir / "roc.csv", rows_to_csv([dict(zip(("threshold", "fpr", "tpr"), r)) for r in curve.roc_rows()]))
    if args.loss_trace:
        with open(run.read(args.loss_trace), newline="", encoding="utf-8") as fh:
            losses = [float(r["loss"]) for r in csv.DictReader(fh)]
        run.wrote(plots.loss_trace(losses, out_dir / "loss_trace.svg"))
    run.finish(out_dir / "report.json")
    emit(args, {"outputs": run.outputs}, "".join(f"{p}\n" for p in run.outputs))
    return 0


def cmd_serve(args, cfg) -> int:  # pragma: no cover - blocking server
    import uvicorn

    from .serve.app import LoadedModel, Service, create_app

    run = Run(args, cfg)
    model = LoadedModel.from_checkpoint(load_model(run, args.model)) if args.model else None
    service = Service(model, load_calibration(run, args.calib))
    uvicorn.run(create_app(service, rate_limit=args.rate_limit), host=args.host, port=args.port, log_level="info")
    return 0


# acquire ---------------------------------------------------------------------


def cmd_acquire_build(args, cfg) -> int:
    from .acquire.manifest import build_manifest, dumps_manifest

    run = Run(args, cfg)
    classes = ClassSet.from_csv(run.read(args.classes).read_text(encoding="utf-8"))
    entries = build_manifest(classes, run.read(args.index).read_text(encoding="utf-8"), args.per_class_limit,
                             seed=args.seed, template=args.template)
    run.write_text(args.out, dumps_manifest(entries))
    run.finish(args.out)
    emit(args, {"entries": len(entries)}, f"{len(entries)} entries\n")
    return 0


def cmd_acquire_group(args, cfg) -> int:
    from .acquire.groups import optimize_groups, write_group_file
    from .acquire.manifest import read_manifest

    run = Run(args, cfg)
    entries = read_manifest(run.read(args.manifest))
    g = optimize_groups(entries, args.groups)
    write_group_file(args.out, args.manifest, g)
    run.wrote(args.out)
    run.finish(args.out)
    emit(args, {"loads": g.loads, "makespan": g.makespan},
         aligned_table([{"group": i, "entries": len(x), "bytes": l} for i, (x, l) in enumerate(zip(g.groups, g.loads))]))
    return 0


def cmd_acquire_run(args, cfg) -> int:
    from .acquire.download import PolitenessPolicy, download_all
    from .acquire.groups import read_group_file
    from .acquire.manifest import read_manifest

    run = Run(args, cfg)
    entries = read_manifest(run.read(args.manifest))
    groups = None
    if args.groups_file:
        _, groups = read_group_file(run.read(args.groups_file))
        if args.group is not None:
            groups = [groups[args.group]]
    policy = PolitenessPolicy(max_global_concurrency=args.concurrency, max_per_host_concurrency=args.max_per_host,
                              bytes_per_second_cap=args.rate_limit, max_attempts=args.attempts,
                              base_backoff=args.backoff)
    journal = download_all(entries, args.root, args.journal, policy, groups=groups, resume=args.resume,
                           seed=args.seed or 0)
    summary = journal.summary()
    emit(args, summary, f"done {summary['done']}  failed {summary['failed']}  bytes {summary['bytes']}\n")
    return journal.exit_code


def cmd_acquire_layout(args, cfg) -> int:
    from .acquire.download import DownloadJournal
    from .acquire.layout import layout_transform
    from .acquire.manifest import read_manifest

    run = Run(args, cfg)
    entries = read_manifest(run.read(args.manifest))
    journal = DownloadJournal.replay(run.read(args.journal))
    res = layout_transform(entries, journal, args.root, args.out, args.template)
    run.wrote(res.index_path)
    run.finish(res.index_path)
    emit(args, {"rows": len(res.rows), "copied": res.copied}, f"{len(res.rows)} files indexed, {res.copied} copied\n")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file (see pipeline.config)")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--seed", type=int)

    p = argparse.ArgumentParser(prog="trustvision", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_, parent=sub):
        sp = parent.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic labeled corpus")
    sp.add_argument("--classes", type=int)
    sp.add_argument("--per-class", type=int)
    sp.add_argument("--variation", type=float)
    sp.add_argument("--lookalike", type=parse_lookalike, action="append", metavar="A:B:S")
    sp.add_argument("--class-offset", type=int, default=0)
    sp.add_argument("--name", default="")
    sp.add_argument("--ood", type=int, metavar="N", help="write N out-of-distribution images instead")
    sp.add_argument("--test-per-class", type=int, help="also split off this many test examples per class")
    sp.add_argument("--test-out", type=Path)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("pretrain", cmd_pretrain, "masked-autoencoder pretraining")
    sp.add_argument("--corpus", type=Path, required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--init", type=Path, help="continue from this checkpoint")
    sp.add_argument("--loss-trace", type=Path)
    sp.add_argument("--out", type=Path, required=True)

    for name, func, help_ in (("finetune", cmd_finetune, "supervised fine-tuning"),
                              ("local", cmd_local, "global-to-local fine-tuning on a class subset")):
        sp = add(name, func, help_)
        sp.add_argument("--model", type=Path, required=True)
        sp.add_argument("--corpus", type=Path, required=True)
        sp.add_argument("--test", type=Path)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--report", type=Path)
        sp.add_argument("--out", type=Path, required=True)
        if name == "finetune":
            sp.add_argument("--head-only", action="store_true")

    sp = add("refine", cmd_refine, "continue fine-tuning with extra expert examples")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--corpus", type=Path, required=True)
    sp.add_argument("--extra", type=Path, required=True)
    sp.add_argument("--test", type=Path, required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--report", type=Path)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("kshot", cmd_kshot, "zero-/few-/full-shot transfer evaluation")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--train", type=Path)
    sp.add_argument("--test", type=Path, required=True)
    sp.add_argument("--k", type=parse_k, action="append", required=True)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--mapping", type=Path, help="CSV of target,source classes for k=0")
    sp.add_argument("--finetune-encoder", action=argparse.BooleanOptionalAction, default=None)
    sp.add_argument("--dataset", default="")
    sp.add_argument("--report", type=Path)

    cal = sub.add_parser("calibrate", help="fit trust calibrations")
    calsub = cal.add_subparsers(dest="kind", required=True, metavar="KIND")
    sp = add("conformal", cmd_calibrate, "split-conformal threshold", calsub)
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--corpus", type=Path, required=True)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--out", type=Path, required=True)
    sp = add("ood", cmd_calibrate, "energy OOD threshold", calsub)
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--id", type=Path, required=True)
    sp.add_argument("--ood", type=Path, required=True)
    sp.add_argument("--temperatures", type=float, nargs="+")
    sp.add_argument("--target-tpr", type=float)
    sp.add_argument("--out", type=Path, required=True)

    for name, func, help_ in (("evaluate", cmd_evaluate, "metrics report as JSON"),
                              ("report", cmd_report, "metrics, tables and SVG figures")):
        sp = add(name, func, help_)
        sp.add_argument("--model", type=Path, required=True)
        sp.add_argument("--corpus", type=Path, required=True)
        sp.add_argument("--train", type=Path, help="training corpus, for per-class train counts")
        sp.add_argument("--calib", type=Path, action="append")
        if name == "evaluate":
            sp.add_argument("--out", type=Path, required=True)
        else:
            sp.add_argument("--ood", type=Path)
            sp.add_argument("--loss-trace", type=Path)
            sp.add_argument("--out-dir", type=Path, required=True)

    sp = add("serve", cmd_serve, "run the HTTP prediction service")
    sp.add_argument("--model", type=Path)
    sp.add_argument("--calib", type=Path, action="append")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.add_argument("--rate-limit", type=int, default=30)

    acq = sub.add_parser("acquire", help="manifest-driven data acquisition")
    acqsub = acq.add_subparsers(dest="action", required=True, metavar="ACTION")
    sp = add("build", cmd_acquire_build, "build a manifest from a source index", acqsub)
    sp.add_argument("--classes", type=Path, required=True, help="taxonomy CSV")
    sp.add_argument("--index", type=Path, required=True, help="CSV with species,url,size")
    sp.add_argument("--per-class-limit", type=int)
    sp.add_argument("--template", default="{species}/{split}/{filename}")
    sp.add_argument("--out", type=Path, required=True)
    sp = add("group", cmd_acquire_group, "split a manifest into byte-balanced groups", acqsub)
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--groups", type=int, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp = add("run", cmd_acquire_run, "download a manifest", acqsub)
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--groups-file", type=Path)
    sp.add_argument("--group", type=int)
    sp.add_argument("--root", type=Path, required=True)
    sp.add_argument("--journal", type=Path, required=True)
    sp.add_argument("--concurrency", type=int, default=8)
    sp.add_argument("--max-per-host", type=int, default=4)
    sp.add_argument("--rate-limit", type=float, metavar="BYTES/S")
    sp.add_argument("--attempts", type=int, default=5)
    sp.add_argument("--backoff", type=float, default=0.5)
    sp.add_argument("--resume", action="store_true")
    sp = add("layout", cmd_acquire_layout, "arrange downloads into a per-species tree", acqsub)
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--journal", type=Path, required=True)
    sp.add_argument("--root", type=Path, required=True)
    sp.add_argument("--template", default="{species}/{filename}")
    sp.add_argument("--out", type=Path, required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    parts = [args.command] + [getattr(args, k) for k in ("kind", "action") if getattr(args, k, None)]
    args.command_path = " ".join(parts)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        if args.command == "synth" and bool(args.test_per_class) != bool(args.test_out):
            raise UsageError("--test-per-class and --test-out go together")
        cfg = cfgmod.load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"trustvision: error: {exc}", file=sys.stderr)
        return 2
    except (CoreError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"trustvision: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
