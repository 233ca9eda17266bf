"""Anomaly scores, threshold rules, and ROC/AUROC evaluation.

A sample's anomaly score is the Euclidean norm of the residual between the
input and the discriminator's reconstruction of the generator's
reconstruction: after training on normal data that chain reproduces normal
inputs closely and mangles anything else. Scoring always runs the networks in
eval mode, so one sample's score never depends on what else is in the batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import Autoencoder

__all__ = [
    "EvaluationError",
    "ScoredSample",
    "RocCurve",
    "anomaly_score",
    "anomaly_scores",
    "classify",
    "roc_curve",
    "select_threshold",
    "score_histogram",
    "write_scores_csv",
    "read_scores_csv",
    "write_roc_csv",
]

NORMAL = "normal"
ANOMALOUS = "anomalous"


class EvaluationError(ValueError):
    """Scoring or curve construction on unusable inputs."""


@dataclass(frozen=True)
class ScoredSample:
    id: str
    score: float
    label: str  # NORMAL or ANOMALOUS

    def __post_init__(self):
        if self.label not in (NORMAL, ANOMALOUS):
            raise EvaluationError(f"label must be normal/anomalous, got {self.label!r}")
        if self.score < 0:
            raise EvaluationError(f"scores are norms and cannot be negative: {self.score}")


@dataclass(frozen=True)
class RocCurve:
    points: tuple[tuple[float, float], ...]   # (fpr, tpr), fpr non-decreasing
    thresholds: tuple[float, ...]             # phi generating each point
    auroc: float


def _residual_norms(x: np.ndarray, generator: Autoencoder,
                    discriminator: Autoencoder, batch_size: int) -> np.ndarray:
    scores = np.empty(x.shape[0], dtype=np.float64)
    with ad.no_grad():
        for i in range(0, x.shape[0], batch_size):
            chunk = x[i:i + batch_size]
            rec = discriminator.forward(
                Tensor(generator.forward(Tensor(chunk), "eval").data), "eval").data
            diff = (chunk.astype(np.float64) - rec.astype(np.float64)).reshape(len(chunk), -1)
            scores[i:i + batch_size] = np.sqrt(np.sum(diff * diff, axis=1))
    return scores


def anomaly_score(x, generator: Autoencoder, discriminator: Autoencoder) -> float:
    """Score one 1xCxHxW (or CxHxW) image."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise EvaluationError(f"anomaly_score expects a single image, got shape {arr.shape}")
    return float(_residual_norms(arr, generator, discriminator, batch_size=1)[0])


def anomaly_scores(x: np.ndarray, generator: Autoencoder,
                   discriminator: Autoencoder, batch_size: int = 256) -> np.ndarray:
    """Score an NCHW batch; equals per-sample scoring because of eval mode."""
    return _residual_norms(np.asarray(x), generator, discriminator, batch_size)


def classify(score: float, phi: float) -> str:
    """Anomalous iff score strictly exceeds the threshold."""
    return ANOMALOUS if score > phi else NORMAL


def roc_curve(samples) -> RocCurve:
    """Threshold sweep over distinct scores, ties grouped, trapezoidal area.

    The first point is always (0, 0) (threshold at the top score: nothing is
    flagged under the strict-inequality rule) and the last is (1, 1). Interior
    thresholds sit halfway between adjacent distinct scores so each one
    actually realizes its point under ``classify``.
    """
    samples = list(samples)
    scores = np.array([s.score for s in samples], dtype=np.float64)
    anomalous = np.array([s.label == ANOMALOUS for s in samples], dtype=bool)
    n_pos = int(anomalous.sum())
    n_neg = len(samples) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError(
            f"ROC needs both classes: {n_pos} anomalous, {n_neg} normal samples")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = anomalous[order]

    points = [(0.0, 0.0)]
    thresholds = [float(sorted_scores[0])]
    tp = fp = 0
    i = 0
    m = len(samples)
    while i < m:
        j = i
        while j < m and sorted_scores[j] == sorted_scores[i]:
            j += 1
        group_pos = int(sorted_pos[i:j].sum())
        tp += group_pos
        fp += (j - i) - group_pos
        if j < m:
            phi = float((sorted_scores[i] + sorted_scores[j]) / 2.0)
        else:
            phi = float(sorted_scores[i] - 1.0)
        points.append((fp / n_neg, tp / n_pos))
        thresholds.append(phi)
        i = j

    auroc = 0.0
    for (f0, t0), (f1, t1) in zip(points, points[1:]):
        auroc += (f1 - f0) * (t0 + t1) / 2.0
    return RocCurve(points=tuple(points), thresholds=tuple(thresholds), auroc=auroc)


def select_threshold(curve: RocCurve, policy: str = "youden_j") -> float:
    """Pick an operating threshold from a curve.

    ``youden_j`` maximizes tpr - fpr (ties resolved toward the smallest phi).
    ``fpr_at:Q`` returns the threshold reaching the highest tpr while keeping
    fpr <= Q; among equal-tpr candidates the largest (most conservative) phi
    wins.
    """
    if policy == "youden_j":
        best_j = -np.inf
        best_phi = curve.thresholds[0]
        for (fpr, tpr), phi in zip(curve.points, curve.thresholds):
            j = tpr - fpr
            if j > best_j or (j == best_j and phi < best_phi):
                best_j = j
                best_phi = phi
        return float(best_phi)
    if policy.startswith("fpr_at:"):
        try:
            q = float(policy.split(":", 1)[1])
        except ValueError as err:
            raise EvaluationError(f"bad fpr_at policy {policy!r}") from err
        best_tpr = -1.0
        best_phi = curve.thresholds[0]
        for (fpr, tpr), phi in zip(curve.points, curve.thresholds):
            if fpr <= q and tpr > best_tpr:
                best_tpr = tpr
                best_phi = phi
        return float(best_phi)
    raise EvaluationError(f"unknown threshold policy {policy!r}")


def score_histogram(samples, bins: int):
    """Per-class score histograms over shared bin edges.

    Returns (edges, normal_counts, anomalous_counts); edges span the score
    range, widened by half a unit on each side when all scores coincide.
    """
    if bins < 2:
        raise EvaluationError(f"need at least 2 bins, got {bins}")
    samples = list(samples)
    if not samples:
        raise EvaluationError("cannot histogram an empty sample list")
    scores = np.array([s.score for s in samples], dtype=np.float64)
    lo, hi = float(scores.min()), float(scores.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    normal = np.array([s.score for s in samples if s.label == NORMAL])
    anomalous = np.array([s.score for s in samples if s.label == ANOMALOUS])
    n_counts, _ = np.histogram(normal, bins=edges)
    a_counts, _ = np.histogram(anomalous, bins=edges)
    return edges, n_counts, a_counts


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_scores_csv(path, samples) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "score", "label"])
        for s in samples:
            w.writerow([s.id, repr(float(s.score)), s.label])


def read_scores_csv(path) -> list[ScoredSample]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != ["id", "score", "label"]:
            raise EvaluationError(f"{path}: expected header id,score,label")
        for row in reader:
            out.append(ScoredSample(id=row["id"], score=float(row["score"]),
                                    label=row["label"]))
    return out


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr", "threshold"])
        for (fpr, tpr), phi in zip(curve.points, curve.thresholds):
            w.writerow([repr(fpr), repr(tpr), repr(phi)])
