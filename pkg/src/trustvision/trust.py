"""Energy-based out-of-distribution detection and split conformal prediction.

Conventions
-----------
* Energy is ``-T * logsumexp(logits / T)``; lower means more in-distribution.
  An input is flagged OOD when its energy is strictly greater than the
  threshold ``tau``; energy exactly at ``tau`` counts as in-distribution.
* ``alpha`` is the miscoverage rate (0.05 targets 95% coverage).  The
  nonconformity score is ``1 - p(true class)``; a class enters the set
  when ``p >= 1 - q_hat``.  When the finite-sample rank exceeds the number
  of calibration points, every class is included.
* OOD calibration is post hoc: it selects a temperature and a threshold
  on held-out logits; no model parameters are fitted.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evalkit.curves import roc_pr
from .nnkit.layers import EmptyInput, softmax_stable

INCLUDE_ALL = "include-all"


class EmptySet(ValueError):
    pass


class EmptyCalibration(ValueError):
    pass


def fingerprint(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return "sha256:" + h.hexdigest()


def _artifact_digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return "sha256:" + hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# energy


def energy_score(logits, T: float = 1.0):
    """Free energy of logit vectors (last axis); scalar for a 1-D input."""
    if T <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise EmptyInput("energy of an empty logit vector")
    z = z / T
    m = z.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(z - m).sum(axis=-1))
    e = -T * lse
    return float(e) if np.ndim(e) == 0 else e


def tpr_threshold(id_energies, target_tpr: float) -> float:
    """Smallest energy threshold with at least ``target_tpr`` of ID energies at or below it."""
    e = np.sort(np.asarray(id_energies, dtype=np.float64))
    if e.size == 0:
        raise EmptySet("no in-distribution energies")
    k = max(1, math.ceil(target_tpr * e.size - 1e-9))
    return float(e[min(k, e.size) - 1])


@dataclass(frozen=True)
class OodCalibration:
    temperature: float
    threshold: float
    target_tpr: float = 0.95
    n_cal: int = 0
    created_from: str = ""
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite")

    def to_dict(self) -> dict:
        return {"kind": "ood", "target_tpr": self.target_tpr, "T": self.temperature, "tau": self.threshold,
                "n_cal": self.n_cal, "created_from": self.created_from, "summary": self.summary}

    @classmethod
    def from_dict(cls, d: dict) -> "OodCalibration":
        if d.get("kind") != "ood":
            raise ValueError("not an OOD calibration artifact")
        return cls(float(d["T"]), float(d["tau"]), float(d.get("target_tpr", 0.95)), int(d.get("n_cal", 0)),
                   d.get("created_from", ""), d.get("summary", {}))

    def digest(self) -> str:
        return _artifact_digest(self.to_dict())


@dataclass(frozen=True)
class OodDecision:
    energy: float
    is_ood: bool


def _split(n: int, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    k = min(n, max(1, int(round(fraction * n))))
    return np.sort(perm[:k]), np.sort(perm[k:])


def ood_metrics(id_energies, ood_energies, tau: float, target_tpr: float = 0.95) -> dict:
    """Separation metrics with ID as the positive class (score = -energy)."""
    id_e = np.asarray(id_energies, dtype=np.float64)
    ood_e = np.asarray(ood_energies, dtype=np.float64)
    curve = roc_pr(-id_e, -ood_e, level=target_tpr)
    tp = int((id_e <= tau).sum())
    tn = int((ood_e > tau).sum())
    return {
        "auroc": curve.auroc,
        "aupr": curve.aupr,
        "fpr_at_tpr": curve.fpr_at_tpr,
        "tpr_at_tau": tp / id_e.size,
        "fpr_at_tau": float((ood_e <= tau).mean()),
        "accuracy": (tp + tn) / (id_e.size + ood_e.size),
        "n_id": int(id_e.size),
        "n_ood": int(ood_e.size),
    }


def calibrate_ood(id_logits, ood_logits, T_grid=(1.0,), target_tpr: float = 0.95, *,
                  cal_fraction: float = 0.6, seed: int = 0) -> tuple[OodCalibration, dict]:
    """Pick the temperature and energy threshold; report held-out metrics.

    Each logit set is split ``cal_fraction`` / rest.  The temperature with
    the highest calibration-split AUROC wins (first in grid on ties); the
    threshold is the ``target_tpr`` quantile of calibration ID energies.
    Metrics are computed on the held-out parts (on the calibration parts
    when a set is too small to hold anything out).
    """
    id_logits = np.atleast_2d(np.asarray(id_logits, dtype=np.float64))
    ood_logits = np.atleast_2d(np.asarray(ood_logits, dtype=np.float64))
    if id_logits.shape[0] == 0 or id_logits.size == 0 or ood_logits.shape[0] == 0 or ood_logits.size == 0:
        raise EmptySet("both ID and OOD logit sets must be nonempty")
    T_grid = list(T_grid)
    if not T_grid:
        raise EmptySet("temperature grid is empty")
    rng = np.random.default_rng(seed)
    id_cal, id_ho = _split(len(id_logits), cal_fraction, rng)
    ood_cal, ood_ho = _split(len(ood_logits), cal_fraction, rng)
    heldout = id_ho.size > 0 and ood_ho.size > 0
    if not heldout:
        id_ho, ood_ho = id_cal, ood_cal

    per_t = []
    for T in T_grid:
        e_id = energy_score(id_logits[id_cal], T)
        e_ood = energy_score(ood_logits[ood_cal], T)
        per_t.append(roc_pr(-e_id, -e_ood, level=target_tpr).auroc)
    best = int(np.argmax(per_t))
    T = float(T_grid[best])
    e_id_cal = energy_score(id_logits[id_cal], T)
    tau = tpr_threshold(e_id_cal, target_tpr)
    metrics = ood_metrics(energy_score(id_logits[id_ho], T), energy_score(ood_logits[ood_ho], T), tau,
                          target_tpr)
    metrics["metrics_split"] = "heldout" if heldout else "calibration"
    metrics["auroc_by_T"] = {repr(float(t)): a for t, a in zip(T_grid, per_t)}
    q = np.quantile(e_id_cal, [0.05, 0.25, 0.5, 0.75, 0.95])
    summary = {"id_energy_quantiles": [float(x) for x in q]}
    calib = OodCalibration(T, tau, target_tpr, int(id_cal.size + ood_cal.size),
                           fingerprint(id_logits, ood_logits), summary)
    return calib, metrics


def ood_decide(logits, calib: OodCalibration) -> OodDecision:
    e = energy_score(logits, calib.temperature)
    return OodDecision(e, bool(e > calib.threshold))


# ---------------------------------------------------------------------------
# conformal


@dataclass(frozen=True)
class ConformalCalibration:
    alpha: float
    q_hat: float | None
    n_cal: int
    created_from: str = ""
    score_kind: str = "one_minus_softmax"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.n_cal < 1:
            raise ValueError("n_cal must be >= 1")
        if self.q_hat is not None and not 0.0 <= self.q_hat <= 1.0:
            raise ValueError("q_hat must lie in [0, 1]")

    @property
    def include_all(self) -> bool:
        return self.q_hat is None

    @property
    def inclusion_threshold(self) -> float:
        return 0.0 if self.q_hat is None else 1.0 - self.q_hat

    def to_dict(self) -> dict:
        return {"kind": "conformal", "alpha": self.alpha,
                "q_hat": INCLUDE_ALL if self.q_hat is None else self.q_hat,
                "n_cal": self.n_cal, "created_from": self.created_from, "score_kind": self.score_kind}

    @classmethod
    def from_dict(cls, d: dict) -> "ConformalCalibration":
        if d.get("kind") != "conformal":
            raise ValueError("not a conformal calibration artifact")
        q = d["q_hat"]
        return cls(float(d["alpha"]), None if q == INCLUDE_ALL else float(q), int(d["n_cal"]),
                   d.get("created_from", ""))

    def digest(self) -> str:
        return _artifact_digest(self.to_dict())


def conformal_rank(n: int, alpha: float) -> int:
    """Finite-sample split-conformal rank ceil((n+1)(1-alpha))."""
    return math.ceil((n + 1) * (1.0 - alpha) - 1e-9)


def calibrate_conformal(cal_probs, cal_labels, alpha: float = 0.05) -> ConformalCalibration:
    probs = np.atleast_2d(np.asarray(cal_probs, dtype=np.float64))
    labels = np.asarray(cal_labels, dtype=int)
    if labels.size == 0:
        raise EmptyCalibration("no calibration examples")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if probs.shape[0] != labels.size:
        raise ValueError("probabilities and labels differ in length")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError("calibration label outside the class range")
    scores = np.sort(1.0 - probs[np.arange(labels.size), labels])
    n = labels.size
    k = conformal_rank(n, alpha)
    q_hat = None if k > n else float(min(max(scores[k - 1], 0.0), 1.0))
    return ConformalCalibration(alpha, q_hat, n, fingerprint(probs, labels))


def conformal_set(probs, calib: ConformalCalibration) -> list[tuple[int, float]]:
    """Classes with ``p >= 1 - q_hat``, by descending probability (ties: lower id first)."""
    p = np.asarray(probs, dtype=np.float64)
    order = sorted(range(p.size), key=lambda i: (-p[i], i))
    if calib.include_all:
        return [(i, float(p[i])) for i in order]
    thr = calib.inclusion_threshold
    return [(i, float(p[i])) for i in order if p[i] >= thr]


def evaluate_coverage(test_probs, test_labels, calib: ConformalCalibration) -> dict:
    probs = np.atleast_2d(np.asarray(test_probs, dtype=np.float64))
    labels = np.asarray(test_labels, dtype=int)
    if labels.size == 0:
        raise EmptySet("empty test set")
    if calib.include_all:
        member = np.ones(probs.shape, dtype=bool)
    else:
        member = probs >= calib.inclusion_threshold
    covered = member[np.arange(labels.size), labels]
    return {"empirical_coverage": float(covered.mean()), "mean_set_size": float(member.sum(1).mean()),
            "n": int(labels.size)}


# ---------------------------------------------------------------------------
# composition


@dataclass(frozen=True)
class TrustVerdict:
    energy: float
    is_ood: bool
    conformal_set: list


def trust_verdict(logits, ood: OodCalibration, conformal: ConformalCalibration) -> TrustVerdict:
    d = ood_decide(logits, ood)
    return TrustVerdict(d.energy, d.is_ood, conformal_set(softmax_stable(logits), conformal))


@dataclass(frozen=True)
class TrustCalibration:
    conformal: ConformalCalibration | None = None
    ood: OodCalibration | None = None

    def to_dict(self) -> dict:
        out = {}
        if self.conformal is not None:
            out["conformal"] = self.conformal.to_dict()
        if self.ood is not None:
            out["ood"] = self.ood.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrustCalibration":
        if d.get("kind") == "conformal":
            return cls(conformal=ConformalCalibration.from_dict(d))
        if d.get("kind") == "ood":
            return cls(ood=OodCalibration.from_dict(d))
        return cls(ConformalCalibration.from_dict(d["conformal"]) if "conformal" in d else None,
                   OodCalibration.from_dict(d["ood"]) if "ood" in d else None)

    def fingerprints(self) -> dict:
        return {k: v.digest() for k, v in (("conformal", self.conformal), ("ood", self.ood)) if v is not None}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "TrustCalibration":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def merged(self, other: "TrustCalibration") -> "TrustCalibration":
        return TrustCalibration(other.conformal or self.conformal, other.ood or self.ood)
