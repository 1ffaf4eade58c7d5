"""Binary classification metrics and rank-based ROC/AUC."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.stats import rankdata


@dataclass
class Metrics:
    acc: float
    pre: float
    f1: float
    auc: Optional[float]
    rec: float
    confusion: Tuple[int, int, int, int]  # (tp, fp, tn, fn)
    roc: List[Tuple[float, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        tp, fp, tn, fn = self.confusion
        return {
            "acc": round(self.acc, 6),
            "pre": round(self.pre, 6),
            "f1": round(self.f1, 6),
            "auc": None if self.auc is None else round(self.auc, 6),
            "rec": round(self.rec, 6),
            "confusion": {"tp": tp, "fp": fp, "tn": tn, "fn": fn},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=False)


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores for {labels.size} labels")
    if scores.size == 0:
        raise ValueError("need at least one prediction")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def compute_auc(scores, labels):
    """Rank AUC (ties count 1/2) and ROC points at every distinct threshold.

    Returns ``(auc, roc)`` with roc a list of (fpr, tpr) from (0, 0) to (1, 1).
    """
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)  # average ranks for ties
    auc = (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)

    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    roc = [(0.0, 0.0)] + [(fp / n_neg, tp / n_pos) for tp, fp in zip(tps.tolist(), fps.tolist())]
    return float(auc), roc


def evaluate_metrics(scores, labels, threshold: float = 0.5) -> Metrics:
    """Confusion-based metrics at ``threshold`` (score >= threshold is positive)."""
    scores, labels = _check(scores, labels)
    if np.any((scores < 0) | (scores > 1)):
        raise ValueError("scores must be probabilities in [0, 1]")
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    acc = (tp + tn) / labels.size
    pre = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * pre * rec / (pre + rec) if pre + rec else 0.0
    if pos.all() or not pos.any():
        auc, roc = None, []
    else:
        auc, roc = compute_auc(scores, labels)
    return Metrics(acc, pre, f1, auc, rec, (tp, fp, tn, fn), roc)


def metrics_from_row(row: dict) -> Metrics:
    """Rebuild a :class:`Metrics` from stored percentages or fractions (e.g. a published table row)."""
    scale = 100.0 if any(row[k] > 1 for k in ("acc", "pre", "f1", "rec")) else 1.0
    conf = row.get("confusion", {})
    return Metrics(
        row["acc"] / scale,
        row["pre"] / scale,
        row["f1"] / scale,
        None if row.get("auc") is None else row["auc"] / scale,
        row["rec"] / scale,
        (conf.get("tp", 0), conf.get("fp", 0), conf.get("tn", 0), conf.get("fn", 0)),
    )


def summarize(rows: List[Metrics]) -> dict:
    """Mean and population std of each metric over folds (absent AUCs skipped)."""
    out = {}
    for key in ("acc", "pre", "f1", "auc", "rec"):
        vals = np.array([getattr(m, key) for m in rows if getattr(m, key) is not None], dtype=np.float64)
        out[key] = {
            "mean": float(vals.mean()) if vals.size else None,
            "std": float(vals.std()) if vals.size else None,
        }
    return out
