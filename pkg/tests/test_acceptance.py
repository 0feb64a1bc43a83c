"""Acceptance criteria, one test per criterion, each checked at its stated tolerance.

Every test appends a PASS/FAIL line to the summary printed at the end of
the pytest run and prints it immediately as well.
"""

import hashlib
import itertools
import json
import math
import os
import random
import signal
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient
from scipy.special import softmax

from conftest import VERDICTS
from trustvision.acquire.download import DONE, DownloadJournal, PolitenessPolicy, download_all
from trustvision.acquire.groups import lpt_bound, lpt_groups
from trustvision.acquire.manifest import ManifestEntry, write_manifest
from trustvision.acquire.testserver import FaultServer
from trustvision.cli import main as cli_main
from trustvision.core import ClassSet, TaxonRecord
from trustvision.evalkit.curves import roc_pr
from trustvision.evalkit.metrics import confusion, macro_metrics, topk_accuracy
from trustvision.evalkit.reports import attribute_errors
from trustvision.nnkit.gradcheck import check_gradients, perturbed_checkpoint
from trustvision.nnkit.vit import ArchConfig, init_checkpoint, with_new_head
from trustvision.pipeline.kshot import KShotSpec, kshot_evaluate
from trustvision.pipeline.stages import pretrain_mae
from trustvision.pipeline.synth import SynthConfig, generate_synthetic
from trustvision.serve.app import LoadedModel, Service, create_app
from trustvision.trust import (
    ConformalCalibration,
    TrustCalibration,
    calibrate_conformal,
    calibrate_ood,
    energy_score,
    evaluate_coverage,
)


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {detail}"
    VERDICTS.append(line)
    print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# shared oracles


def sweep_threshold(energies, target):
    """Smallest observed energy whose at-or-below fraction reaches ``target``."""
    e = np.asarray(energies)
    for t in np.sort(e):
        if (e <= t).mean() >= target - 1e-12:
            return float(t)
    raise AssertionError("unreachable")


def sweep_fpr_at_tpr(pos, neg, level):
    """Lowest FPR over thresholds on observed scores whose TPR reaches ``level``."""
    pos, neg = np.asarray(pos), np.asarray(neg)
    best = 1.0
    for t in np.unique(np.r_[pos, neg]):
        if (pos >= t).mean() >= level - 1e-12:
            best = min(best, float((neg >= t).mean()))
    return best


def loop_metrics(preds, labels, C):
    P = R = F = 0.0
    for c in range(C):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        P += tp / (tp + fp) if tp + fp else 0.0
        R += tp / (tp + fn) if tp + fn else 0.0
        F += 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
    acc = sum(p == y for p, y in zip(preds, labels)) / len(labels)
    return acc, P / C, R / C, F / C


def loop_topk(probs, labels, k):
    hits = 0
    for row, y in zip(probs, labels):
        order = sorted(range(len(row)), key=lambda i: (-row[i], i))
        hits += y in order[:k]
    return hits / len(labels)


def brute_makespan(sizes, G):
    """Optimum by trying every assignment; item 0 goes to group 0 by symmetry."""
    best = math.inf
    for rest in itertools.product(range(G), repeat=len(sizes) - 1):
        loads = [0] * G
        for s, g in zip(sizes, (0, *rest)):
            loads[g] += s
        best = min(best, max(loads))
    return best


_PAIRS: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def subset_pairs(n):
    """All (mask, submask) pairs over n items."""
    if n not in _PAIRS:
        masks, subs = [], []
        for m in range(1 << n):
            s = m
            while True:
                masks.append(m)
                subs.append(s)
                if s == 0:
                    break
                s = (s - 1) & m
        _PAIRS[n] = (np.array(masks), np.array(subs))
    return _PAIRS[n]


def optimal_makespan(sizes, G):
    """Exact optimum for G <= 4 by dynamic programming over item subsets."""
    n = len(sizes)
    full = (1 << n) - 1
    sums = np.zeros(1 << n, dtype=np.int64)
    for i, s in enumerate(sizes):
        sums[1 << i:1 << (i + 1)] = sums[:1 << i] + s
    if G == 1:
        return int(sums[full])
    masks, subs = subset_pairs(n)
    best2 = np.full(1 << n, np.iinfo(np.int64).max)
    np.minimum.at(best2, masks, np.maximum(sums[subs], sums[masks] - sums[subs]))
    if G == 2:
        return int(best2[full])
    sub = np.arange(1 << n)
    if G == 3:
        return int(np.min(np.maximum(sums[sub], best2[full ^ sub])))
    return int(np.min(np.maximum(best2[sub], best2[full ^ sub])))


# ---------------------------------------------------------------------------
# 1 gradients


class TestGradientCorrectness:
    def test_finite_differences_on_three_seeds(self):
        t0 = time.perf_counter()
        arch = ArchConfig(drop_path=0.0)
        worst = 0.0
        blocks = set()
        for seed in (0, 1, 2):
            ck = with_new_head(perturbed_checkpoint(arch, seed), 12, seed=seed, drop_decoder=False)
            rng = np.random.default_rng([seed, 5])
            x = rng.random((2, arch.image_size, arch.image_size, arch.in_chans))
            for norm_pix in (False, True):
                c = ck.evolve(arch=ArchConfig(drop_path=0.0, num_classes=12, norm_pix_loss=norm_pix))
                checks = check_gradients(c, x, labels=[seed, 11 - seed], mask_seed=seed, per_block=3, seed=seed,
                                         h=1e-3, order=4)
                worst = max(worst, max(r.max_rel_error for r in checks))
                blocks |= {(r.name, r.loss_kind) for r in checks}
        elapsed = time.perf_counter() - t0
        all_blocks = {(n, k) for n in ck.params for k in ("mae", "cross_entropy")}
        verdict(1, worst <= 1e-4 and blocks == all_blocks and elapsed < 120,
                f"max FD relative error {worst:.2e} <= 1e-4 over {len(blocks)} block/loss pairs, {elapsed:.0f}s < 120s")


# ---------------------------------------------------------------------------
# 2, 3 pretraining gain and k-shot behaviour

# A one-block encoder on 8px patches with half the patches masked; see the decisions ledger.
PRETRAIN_ARCH = ArchConfig(patch_size=8, depth=1, mask_ratio=0.5, drop_path=0.0, norm_pix_loss=True)
PRETRAIN_STEPS = 3000
SEEDS = (0, 1, 2, 3, 4)


def pretrain(seed):
    unlabeled = generate_synthetic(SynthConfig(examples_per_class=100, seed=1000 + seed))
    ck, _ = pretrain_mae(unlabeled, PRETRAIN_ARCH, PRETRAIN_STEPS, seed, batch_size=32, warmup=50)
    return ck


def target_task(seed):
    labeled = generate_synthetic(SynthConfig(seed=2000 + seed))
    return labeled.split(20, seed)


@pytest.fixture(scope="module")
def pretrained():
    return {}


class TestPretrainGain:
    def test_gain_at_k10_over_five_seeds(self, pretrained):
        t0 = time.perf_counter()
        gains = []
        for seed in SEEDS:
            ck = pretrain(seed)
            pretrained[seed] = ck
            train, test = target_task(seed)
            spec = KShotSpec(10, trials=2, seed=seed)
            a = kshot_evaluate(ck, train, test, spec).mean
            b = kshot_evaluate(init_checkpoint(ck.arch, seed), train, test, spec).mean
            gains.append(100 * (a - b))
        elapsed = time.perf_counter() - t0
        mean = float(np.mean(gains))
        verdict(2, mean >= 10 and elapsed < 600,
                f"mean k=10 gain {mean:.1f} points >= 10 (per seed {', '.join(f'{g:.1f}' for g in gains)}), "
                f"{elapsed:.0f}s < 600s")


class TestKShotMonotonicity:
    def test_more_shots_do_not_hurt(self, pretrained):
        ck = pretrained.get(0) or pretrain(0)
        train, test = target_task(0)
        acc = {k: kshot_evaluate(ck, train, test, KShotSpec(k, trials=10 if k != "all" else 1, seed=0)).mean
               for k in (10, 20, "all")}
        ok = acc[20] >= acc[10] - 0.02 and acc["all"] >= acc[20] - 0.02
        verdict(3, ok, f"acc k=10 {acc[10]:.3f}, k=20 {acc[20]:.3f}, k=all {acc['all']:.3f} "
                       f"(each step >= previous - 0.02)")


# ---------------------------------------------------------------------------
# 4 conformal coverage


def synthetic_classifier(n, C, rng):
    labels = rng.integers(0, C, n)
    logits = rng.normal(0.0, 1.0, (n, C))
    logits[np.arange(n), labels] += 2.0
    return softmax(logits, axis=1), labels


class TestConformalCoverage:
    def test_coverage_and_set_size(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        covs, monotone = [], True
        for _ in range(20):
            p_cal, y_cal = synthetic_classifier(500, 10, rng)
            p_test, y_test = synthetic_classifier(500, 10, rng)
            covs.append(evaluate_coverage(p_test, y_test, calibrate_conformal(p_cal, y_cal, 0.05))
                        ["empirical_coverage"])
            sizes = [evaluate_coverage(p_test, y_test, calibrate_conformal(p_cal, y_cal, a))["mean_set_size"]
                     for a in (0.01, 0.02, 0.05, 0.1, 0.2, 0.3)]
            monotone &= all(s >= t for s, t in zip(sizes, sizes[1:]))
        mean = float(np.mean(covs))
        elapsed = time.perf_counter() - t0
        verdict(4, 0.93 <= mean <= 0.985 and monotone and elapsed < 60,
                f"mean coverage {mean:.4f} in [0.93, 0.985] at alpha 0.05, set size monotone in alpha: {monotone}, "
                f"{elapsed:.1f}s < 60s")


# ---------------------------------------------------------------------------
# 5 OOD separation


def id_logits(n, C, rng):
    z = rng.normal(0.0, 1.0, (n, C))
    z[np.arange(n), rng.integers(0, C, n)] += 5.0
    return z


class TestOodSeparation:
    def test_separation_threshold_and_control(self):
        rng = np.random.default_rng(7)
        C = 10
        ind, ood = id_logits(5000, C, rng), rng.normal(0.0, 1.0, (5000, C)) + 0.5
        grid = (0.5, 1.0, 2.0)
        calib, m = calibrate_ood(ind, ood, grid, 0.95, seed=3)

        # replay the split to check tau and FPR95 against threshold sweeps
        split = np.random.default_rng(3)
        perm_id, perm_ood = split.permutation(5000), split.permutation(5000)
        id_cal, id_ho = np.sort(perm_id[:3000]), np.sort(perm_id[3000:])
        ood_ho = np.sort(perm_ood[3000:])
        T = calib.temperature
        tau_oracle = sweep_threshold(energy_score(ind[id_cal], T), 0.95)
        e_id, e_ood = energy_score(ind[id_ho], T), energy_score(ood[ood_ho], T)
        fpr_oracle = sweep_fpr_at_tpr(-e_id, -e_ood, 0.95)

        _, control = calibrate_ood(id_logits(4000, C, rng), id_logits(4000, C, rng), grid, 0.95, seed=4)
        ok = (m["auroc"] >= 0.90 and abs(m["tpr_at_tau"] - 0.95) <= 0.02 and abs(control["auroc"] - 0.5) <= 0.05
              and calib.threshold == tau_oracle and m["fpr_at_tpr"] == fpr_oracle)
        verdict(5, ok, f"AUROC {m['auroc']:.4f} >= 0.90, held-out TPR {m['tpr_at_tau']:.4f} in 0.95+-0.02, "
                       f"ID-vs-ID AUROC {control['auroc']:.4f} in 0.5+-0.05, tau and FPR95 equal the sweep oracle "
                       f"({calib.threshold == tau_oracle}, {m['fpr_at_tpr'] == fpr_oracle})")


# ---------------------------------------------------------------------------
# 6 metric oracles


class TestMetricOracles:
    def test_confusion_metrics_and_auroc(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(1000):
            C = int(rng.integers(1, 11))
            n = int(rng.integers(1, 201))
            labels = rng.integers(0, C, n)
            probs = rng.integers(0, 5, (n, C)).astype(float)  # coarse so ties occur
            preds = [sorted(range(C), key=lambda i: (-row[i], i))[0] for row in probs]
            m = macro_metrics(confusion(preds, labels, C))
            want = loop_metrics(preds, labels, C)
            got = (m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1)
            worst = max(worst, max(abs(a - b) for a, b in zip(got, want)))
            k = int(rng.integers(1, C + 1))
            worst = max(worst, abs(topk_accuracy(probs, labels, k) - loop_topk(probs, labels, k)))
        worst_auc = 0.0
        for _ in range(200):
            pos = rng.integers(0, 20, int(rng.integers(1, 60))) / 4
            neg = rng.integers(0, 20, int(rng.integers(1, 60))) / 4
            u = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg) / (len(pos) * len(neg))
            worst_auc = max(worst_auc, abs(roc_pr(pos, neg).auroc - u))
        verdict(6, worst <= 1e-12 and worst_auc <= 1e-12,
                f"max deviation from loop oracles {worst:.1e} over 1000 instances, "
                f"AUROC vs Mann-Whitney {worst_auc:.1e} over 200 score sets (<= 1e-12)")


# ---------------------------------------------------------------------------
# 7 attribution

TAXA = [
    ("Avena sterilis", "Poaceae", 297), ("Avena fatua", "Poaceae", 5001), ("Avena barbata", "Poaceae", 1923),
    ("Avena sativa", "Poaceae", 1251), ("Lapsana communis", "Asteraceae", 29768),
    ("Ranunculus bulbosus", "Ranunculaceae", 0), ("Rumex longifolius", "Polygonaceae", 783),
    ("Rumex crispus", "Polygonaceae", 32739), ("Rumex obtusifolius", "Polygonaceae", 24950),
    ("Rumex acetosa", "Polygonaceae", 7542), ("Rumex pseudonatronatus", "Polygonaceae", 1877),
    ("Verbesina encelioides", "Asteraceae", 0),
]
# per-image predictions of the two low-accuracy classes; the 20th row goes to the main confounder
TEST_ROWS = {
    "Avena sterilis": {"Avena fatua": 13, "Avena barbata": 5, "Lapsana communis": 1, "Ranunculus bulbosus": 1},
    "Rumex longifolius": {"Rumex crispus": 13, "Rumex acetosa": 2, "Rumex obtusifolius": 1,
                          "Verbesina encelioides": 1, "Rumex longifolius": 1, "Rumex pseudonatronatus": 2},
}


class TestAttribution:
    def test_published_confusion_counts(self):
        cs = ClassSet.from_records(TaxonRecord(0, n, family=f, image_count=c) for n, f, c in TAXA)
        preds, labels = [], []
        for src, row in TEST_ROWS.items():
            for dst, n in row.items():
                preds += [cs.index_of(dst)] * n
                labels += [cs.index_of(src)] * n
        recs = {r.source_name: r for r in attribute_errors(confusion(preds, labels, len(cs), cs), cs,
                                                            [c for _, _, c in TAXA])}
        a, r = recs["Avena sterilis"], recs["Rumex longifolius"]
        ok = (set(recs) == set(TEST_ROWS) and a.confounder_name == "Avena fatua" and a.same_genus
              and r.confounder_name == "Rumex crispus" and r.same_genus and r.confounder_train_count == 32739
              and a.accuracy == 0.0 and r.accuracy == 0.05)
        verdict(7, ok, f"Avena sterilis -> {a.confounder_name} (same genus {a.same_genus}), "
                       f"Rumex longifolius -> {r.confounder_name} (same genus {r.same_genus}, "
                       f"confounder train count {r.confounder_train_count})")


# ---------------------------------------------------------------------------
# 8 grouping bound


def worst_case_instance(G):
    """Sizes on which LPT meets its bound exactly: two each of 2G-1 .. G+1, then three of G."""
    return [s for s in range(2 * G - 1, G, -1) for _ in range(2)] + [G] * 3


class TestGroupingBound:
    def test_exhaustive_small_instances(self):
        t0 = time.perf_counter()
        rng = random.Random(8)
        # every size multiset over {1..5} up to 7 entries, plus random instances up to 12 entries
        instances = [list(c) for n in range(1, 8) for c in itertools.combinations_with_replacement(range(1, 6), n)]
        instances += [[rng.randint(1, 100) for _ in range(n)] for n in range(8, 13) for _ in range(40)]
        instances += [worst_case_instance(G) for G in range(2, 5)]
        oracle_agrees = all(optimal_makespan(sz, G) == brute_makespan(sz, G)
                            for sz in instances[::25] if len(sz) <= 8 for G in range(1, 5))
        worst, checked, tight = 0.0, 0, 0
        for sizes in instances:
            for G in range(1, 5):
                ratio = lpt_groups(sizes, G).makespan / optimal_makespan(sizes, G)
                worst = max(worst, ratio / lpt_bound(G))
                tight += abs(ratio - lpt_bound(G)) < 1e-12 and G > 1
                checked += 1
        elapsed = time.perf_counter() - t0
        verdict(8, worst <= 1 + 1e-12 and oracle_agrees and tight >= 3 and elapsed < 60,
                f"max LPT/optimum relative to the (4/3 - 1/(3G)) bound {worst:.4f} <= 1 over {checked} "
                f"(instance, G) pairs with up to 12 entries and G <= 4, bound met exactly {tight} times, "
                f"{elapsed:.1f}s < 60s")


# ---------------------------------------------------------------------------
# 9 downloader


def sha(b):
    return "sha256:" + hashlib.sha256(b).hexdigest()


class TestDownloaderFaults:
    def test_faults_cap_and_kill_resume(self, tmp_path):
        t0 = time.perf_counter()
        rng = random.Random(9)
        files = {f"/d/{i:03d}.bin": rng.randbytes(rng.randint(500, 6000)) for i in range(200)}
        hosts = ("127.0.0.1", "localhost")
        cap = 2
        with FaultServer(files, fault_rate=0.25, seed=9) as srv:
            entries = [ManifestEntry(srv.url(p, hosts[k % 2]), f"sp{k % 5}", len(b), sha(b))
                       for k, (p, b) in enumerate(sorted(files.items()))]
            policy = PolitenessPolicy(max_global_concurrency=6, max_per_host_concurrency=cap, base_backoff=0.0,
                                      jitter=False)
            j = download_all(entries, tmp_path / "a", tmp_path / "a.ndjson", policy)
            complete = all((tmp_path / "a" / e.dest).read_bytes() == files[e.url.split(str(srv.port))[1]]
                           for e in entries)
            faults, peak = srv.faults, max(srv.max_active.values())
            first = j.count(DONE) == 200 and complete and peak <= cap and faults > 0

        with FaultServer(files, fault_rate=0.25, seed=10, latency=0.01) as srv:
            entries = [ManifestEntry(srv.url(p, hosts[k % 2]), f"sp{k % 5}", len(b), sha(b))
                       for k, (p, b) in enumerate(sorted(files.items()))]
            write_manifest(tmp_path / "m.ndjson", entries)
            journal = tmp_path / "b.ndjson"
            cmd = [sys.executable, "-m", "trustvision.cli", "acquire", "run", "--manifest", str(tmp_path / "m.ndjson"),
                   "--root", str(tmp_path / "b"), "--journal", str(journal), "--concurrency", "4",
                   "--max-per-host", str(cap), "--backoff", "0"]
            proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
            deadline = time.monotonic() + 60
            while time.monotonic() < deadline:
                text = journal.read_text() if journal.exists() else ""
                if text.count('"event": "done"') >= 60:
                    break
                time.sleep(0.02)
            proc.send_signal(signal.SIGKILL)
            proc.wait()
            killed_done = DownloadJournal.replay(journal).count(DONE)
            before = dict(srv.requests)
            code = subprocess.run(cmd + ["--resume"], stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
                                  timeout=120).returncode
            final = DownloadJournal.replay(journal)
            done_events = [json.loads(line)["i"] for line in journal.read_text().splitlines()
                           if line.strip() and json.loads(line)["event"] == "done"]
            # entries finished before the kill must not be requested again after it
            paths = [e.url.split(str(srv.port), 1)[1] for e in entries]
            repeat = [i for i in set(done_events[:killed_done]) if srv.requests.get(paths[i]) != before.get(paths[i])]
            complete2 = all((tmp_path / "b" / e.dest).read_bytes() == files[p] for e, p in zip(entries, paths))
            peak2 = max(srv.max_active.values())
        dupes = len(done_events) - len(set(done_events))
        elapsed = time.perf_counter() - t0
        ok = (first and code == 0 and final.count(DONE) == 200 and complete2 and peak2 <= cap and dupes == 0
              and not repeat and 0 < killed_done < 200 and elapsed < 120)
        verdict(9, ok, f"200 entries at 25% faults ({faults} injected): complete {complete}, "
                       f"per-host peak {max(peak, peak2)} <= {cap}; killed after {killed_done} done, resume exit {code}, "
                       f"complete {complete2}, duplicate completions {dupes}, refetched {len(repeat)}, "
                       f"{elapsed:.0f}s < 120s")


# ---------------------------------------------------------------------------
# 10 serving


class TestServingContract:
    def test_rate_limit_latency_and_example_response(self):
        clock = [0.0]
        cs = ClassSet.from_records([TaxonRecord(0, "Amaranthus palmeri", "Palmer amaranth", family="Amaranthaceae"),
                                    TaxonRecord(0, "Amaranthus spinosus", "spiny amaranth", family="Amaranthaceae")])
        arch = ArchConfig(num_classes=2)
        ck = with_new_head(init_checkpoint(arch, 0), 2, seed=0)
        calib = TrustCalibration(conformal=ConformalCalibration(0.05, 0.903, 500))
        svc = Service(LoadedModel.from_checkpoint(ck, cs), calib)

        limited = TestClient(create_app(svc, clock=lambda: clock[0]))
        codes = []
        for i in range(31):
            clock[0] = i * 1.0
            r = limited.post("/v1/predict", json={"features": [0.0, 0.0]})
            codes.append(r.status_code)
        retry = r.headers.get("Retry-After")
        limit_ok = codes == [200] * 30 + [429] and retry is not None and int(retry) >= 1

        open_client = TestClient(create_app(svc, rate_limit=10_000))
        img = np.random.default_rng(0).random((32, 32)).tolist()
        lat = []
        for _ in range(50):
            t = time.perf_counter()
            assert open_client.post("/v1/predict", json={"array": img}).status_code == 200
            lat.append(1000 * (time.perf_counter() - t))
        p95 = float(np.percentile(lat, 95))

        body = open_client.post("/v1/predict", json={"features": np.log([0.56, 0.44]).tolist()}).json()
        got = [(m["scientific_name"], round(m["probability"], 2)) for m in body["conformal_set"]]
        example_ok = got == [("Amaranthus palmeri", 0.56), ("Amaranthus spinosus", 0.44)]
        verdict(10, limit_ok and p95 < 3000 and example_ok,
                f"31st request {codes[-1]} with Retry-After {retry}; p95 latency {p95:.1f} ms < 3000 ms; "
                f"pinned example set {got} at q_hat 0.903")


# ---------------------------------------------------------------------------
# 11 determinism

CHAIN_INI = """\
[synth]
num_classes = 4
examples_per_class = 16
[pretrain]
steps = 20
batch_size = 16
[finetune]
epochs = 2
per_class_test = 4
"""


def run_chain(d: Path) -> dict[str, bytes]:
    d.mkdir()
    (d / "c.ini").write_text(CHAIN_INI)
    c = ["--config", "c.ini", "--seed", "5"]
    steps = [
        ["synth", *c, "--test-per-class", "4", "--test-out", "test.tvc", "--out", "train.tvc"],
        ["synth", *c, "--ood", "16", "--out", "ood.tvc"],
        ["pretrain", *c, "--corpus", "train.tvc", "--out", "pre.tvm"],
        ["finetune", *c, "--model", "pre.tvm", "--corpus", "train.tvc", "--out", "ft.tvm", "--report", "ft.json"],
        ["calibrate", "conformal", *c, "--model", "ft.tvm", "--corpus", "test.tvc", "--out", "conf.json"],
        ["calibrate", "ood", *c, "--model", "ft.tvm", "--id", "test.tvc", "--ood", "ood.tvc", "--out", "ood.json"],
        ["evaluate", *c, "--model", "ft.tvm", "--corpus", "test.tvc", "--calib", "conf.json", "--calib", "ood.json",
         "--out", "eval.json"],
    ]
    cwd = os.getcwd()
    os.chdir(d)
    try:
        for argv in steps:
            assert cli_main(argv) == 0, argv
    finally:
        os.chdir(cwd)
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "c.ini"}


class TestDeterminism:
    def test_chain_twice_is_byte_identical(self, tmp_path):
        a, b = run_chain(tmp_path / "one"), run_chain(tmp_path / "two")
        differing = sorted(k for k in a if a[k] != b.get(k))
        verdict(11, set(a) == set(b) and not differing,
                f"{len(a)} artifacts (checkpoints, calibrations, reports, run manifests) byte-identical across "
                f"two runs; differing: {differing or 'none'}")
