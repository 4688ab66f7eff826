"""Multi-label evaluation: per-class AP / mAP and the six P/R/F1 metrics.

Ground truth is tri-state; unknown entries are excluded from every count.
AP is non-interpolated. Thresholded reports call a label positive when its
score is strictly above the threshold; top-3 reports call the three
highest-scoring labels per image positive (ties prefer the smaller class
index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndefinedMetricError(ValueError):
    """A metric is requested for a class with no positive ground truth."""


@dataclass
class EvalBatch:
    scores: np.ndarray  # (N, C) floats
    truth: np.ndarray   # (N, C) in {+1, -1, 0}

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.truth = np.asarray(self.truth)
        if self.scores.shape != self.truth.shape or self.scores.ndim != 2:
            raise ValueError(f"scores {self.scores.shape} vs truth {self.truth.shape}")
        if not np.isin(self.truth, (-1, 0, 1)).all():
            raise ValueError("truth entries must be +1, -1 or 0")


def average_precision(scores: np.ndarray, truth: np.ndarray) -> float:
    """Non-interpolated AP of one class: mean of precision@k over the ranks
    k that hold a positive, sorting by descending score with ties broken
    toward the smaller sample index."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    pos = truth == 1
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = pos[order]
    cum = np.cumsum(hits)
    ranks = np.arange(1, len(scores) + 1)
    return float((cum[hits] / ranks[hits]).sum() / n_pos)


def mean_average_precision(batch: EvalBatch) -> tuple[float, list[float | None]]:
    """mAP over classes with at least one known positive; the per-class list
    holds None for skipped classes. Unknown cells are dropped per class."""
    per_class: list[float | None] = []
    vals = []
    for c in range(batch.scores.shape[1]):
        known = batch.truth[:, c] != 0
        t = batch.truth[known, c]
        if not (t == 1).any():
            per_class.append(None)
            continue
        ap = average_precision(batch.scores[known, c], t)
        per_class.append(ap)
        vals.append(ap)
    if not vals:
        raise UndefinedMetricError("no class has a positive example")
    return float(np.mean(vals)), per_class


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0.0 else 2.0 * p * r / (p + r)


def top3_predictions(scores: np.ndarray) -> np.ndarray:
    """Boolean (N, C) mask of the 3 top-scoring labels per image."""
    n, c = scores.shape
    k = min(3, c)
    pred = np.zeros((n, c), dtype=bool)
    for i in range(n):
        order = np.argsort(-scores[i], kind="stable")
        pred[i, order[:k]] = True
    return pred


def classification_report(batch: EvalBatch, mode: str = "all",
                          threshold: float = 0.5) -> dict[str, float]:
    """CP/CR/CF1 (per-class means) and OP/OR/OF1 (pooled counts).

    mode="all" thresholds scores; mode="top3" predicts each image's three
    best labels. Per-class precision/recall with an empty denominator
    contribute 0 to the means.
    """
    if batch.scores.shape[0] == 0:
        raise ValueError("empty batch")
    if mode == "all":
        pred = batch.scores > threshold
    elif mode == "top3":
        pred = top3_predictions(batch.scores)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    known = batch.truth != 0
    pos = batch.truth == 1
    tp = (pred & pos & known).sum(axis=0).astype(float)
    fp = (pred & (batch.truth == -1)).sum(axis=0).astype(float)
    fn = (~pred & pos & known).sum(axis=0).astype(float)

    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1e-300), 0.0)
        rec = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1e-300), 0.0)
    cp, cr = float(prec.mean()), float(rec.mean())
    tp_all, fp_all, fn_all = tp.sum(), fp.sum(), fn.sum()
    op = float(tp_all / (tp_all + fp_all)) if tp_all + fp_all > 0 else 0.0
    orec = float(tp_all / (tp_all + fn_all)) if tp_all + fn_all > 0 else 0.0
    return {
        "CP": cp, "CR": cr, "CF1": _f1(cp, cr),
        "OP": op, "OR": orec, "OF1": _f1(op, orec),
    }


def full_report(batch: EvalBatch, threshold: float = 0.5) -> dict:
    """The evaluation schema: mAP, both report modes, per-class AP."""
    mAP, per_class = mean_average_precision(batch)
    report = {"mAP": mAP}
    report.update(classification_report(batch, mode="all", threshold=threshold))
    report["top3"] = classification_report(batch, mode="top3")
    report["per_class_ap"] = per_class
    return report
