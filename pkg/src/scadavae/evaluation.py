"""Confusion matrices, precision/recall/F1, ROC/AUC and F1-optimal thresholds.

Attack is the positive class. LRP is turned into an anomaly score by
negation, so a window is flagged at threshold ``t`` iff ``lrp < t``.
Unlabeled entries (label -1) are dropped before counting.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import ATTACK, NORMAL, UNLABELED


class SingleClassError(ValueError):
    """Raised when a metric needs both attack and normal labels."""


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def _definite(pred, labels):
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} predictions, {labels.shape[0]} labels")
    keep = labels != UNLABELED
    return pred[keep].astype(bool), labels[keep] == ATTACK


def confusion(flags, labels) -> ConfusionMatrix:
    p, y = _definite(flags, labels)
    return ConfusionMatrix(int((p & y).sum()), int((p & ~y).sum()),
                           int((~p & y).sum()), int((~p & ~y).sum()))


def _ratio(a, b):
    return a / b if b else 0.0


def precision_recall_f1(cm: ConfusionMatrix):
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    f1 = _ratio(2.0 * precision * recall, precision + recall)
    return precision, recall, f1


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    lrp_cut: np.ndarray  # point i flags lrp <= lrp_cut[i]; the origin has -inf
    auc: float


def _scores_labels(lrp, labels):
    lrp = np.asarray(lrp, float)
    labels = np.asarray(labels)
    if lrp.shape != labels.shape:
        raise ValueError("lrp and labels differ in length")
    keep = labels != UNLABELED
    lrp, y = lrp[keep], labels[keep] == ATTACK
    if y.all() or not y.any():
        raise SingleClassError("need at least one attack and one normal label")
    return lrp, y


def roc(lrp, labels) -> RocCurve:
    """ROC over every distinct LRP value; tied values form a single sweep step."""
    lrp, y = _scores_labels(lrp, labels)
    order = np.argsort(lrp, kind="mergesort")
    s, ys = lrp[order], y[order]
    last = np.r_[s[1:] != s[:-1], True]  # end of each tie group
    tp = np.cumsum(ys)[last]
    fp = np.cumsum(~ys)[last]
    P, N = y.sum(), (~y).sum()
    tpr = np.r_[0.0, tp / P]
    fpr = np.r_[0.0, fp / N]
    cut = np.r_[-np.inf, s[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, cut, auc)


def auc_concordance(lrp, labels) -> float:
    """P(attack lrp < normal lrp) + 0.5 * P(tie), by explicit pair counting."""
    lrp, y = _scores_labels(lrp, labels)
    a, n = lrp[y], lrp[~y]
    less = (a[:, None] < n[None, :]).sum()
    ties = (a[:, None] == n[None, :]).sum()
    return float((less + 0.5 * ties) / (a.size * n.size))


def threshold_candidates(lrp):
    """Midpoints between consecutive distinct values plus one sentinel beyond each end."""
    s = np.unique(np.asarray(lrp, float))
    mids = (s[:-1] + s[1:]) / 2.0
    return np.r_[s[0] - 1.0, mids, s[-1] + 1.0]


def optimal_threshold_f1(lrp, labels):
    """Enumerate all achievable cuts; ties in F1 resolve to the lower threshold."""
    lrp, y = _scores_labels(lrp, labels)
    cands = threshold_candidates(lrp)
    order = np.argsort(lrp, kind="mergesort")
    s, ys = lrp[order], y[order]
    k = np.searchsorted(s, cands, side="left")  # count of lrp < t
    ctp = np.r_[0, np.cumsum(ys)]
    tp = ctp[k]
    fp = k - tp
    fn = y.sum() - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        rec = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / np.where(prec + rec > 0, prec + rec, 1), 0.0)
    best = int(np.argmax(f1))  # candidates ascend, so the first max is the lowest threshold
    return float(cands[best]), float(f1[best])


def f1_at(lrp, labels, threshold):
    return precision_recall_f1(confusion(np.asarray(lrp) < threshold, labels))[2]


def write_roc_csv(curve: RocCurve, path, comments=()):
    with open(path, "w") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        fh.write("# point i flags windows with lrp <= threshold\n")
        fh.write("threshold,fpr,tpr\n")
        for t, f, p in zip(curve.lrp_cut, curve.fpr, curve.tpr):
            fh.write(f"{t!r},{f!r},{p!r}\n")


def write_confusion_csv(cm: ConfusionMatrix, path, threshold=None, comments=()):
    with open(path, "w") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        if threshold is not None:
            fh.write(f"# threshold {threshold!r}\n")
        fh.write("actual,predicted_attack,predicted_safe\n")
        fh.write(f"attack,{cm.tp},{cm.fn}\n")
        fh.write(f"normal,{cm.fp},{cm.tn}\n")


def summary_text(cm: ConfusionMatrix, threshold, curve: RocCurve | None = None):
    p, r, f1 = precision_recall_f1(cm)
    lines = [
        f"threshold   {threshold:.6g}",
        f"tp {cm.tp}  fp {cm.fp}  fn {cm.fn}  tn {cm.tn}",
        f"precision   {p:.4f}",
        f"recall      {r:.4f}",
        f"f1          {f1:.4f}",
        f"fpr         {_ratio(cm.fp, cm.fp + cm.tn):.4f}",
    ]
    if curve is not None:
        lines.append(f"roc_auc     {curve.auc:.4f}")
    return "\n".join(lines)


__all__ = [
    "ATTACK", "NORMAL", "UNLABELED", "ConfusionMatrix", "RocCurve", "SingleClassError",
    "confusion", "precision_recall_f1", "roc", "auc_concordance", "optimal_threshold_f1",
    "threshold_candidates", "f1_at", "write_roc_csv", "write_confusion_csv", "summary_text",
]
