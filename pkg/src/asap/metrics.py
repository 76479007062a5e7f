"""Evaluation metrics for detection, type classification and grounding.

Binary: AUC, EER, ACC.  Multi-label: mAP, CF1, OF1.  Image grounding:
IoUmean, IoU50, IoU75.  Text grounding: token Precision, Recall, F1.

``EvalRecord`` streams are JSON Lines with the keys
``id, y_bin, y_mul, y_box, y_tok, s_bin, s_mul, s_box, s_tok``; ``y_tok`` and
``s_tok`` only cover the real (non-padded) tokens of each sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TYPES = ("FS", "FA", "TS", "TA")
METRIC_KEYS = (
    "AUC", "EER", "ACC",
    "mAP", "CF1", "OF1",
    "IoUmean", "IoU50", "IoU75",
    "Precision", "Recall", "F1",
)


class UndefinedMetricError(ValueError):
    """The metric is undefined for this input (e.g. only one class present)."""


@dataclass
class EvalRecord:
    id: str
    y_bin: int
    y_mul: list[float]
    y_box: list[float]
    y_tok: list[int]
    s_bin: float
    s_mul: list[float]
    s_box: list[float]
    s_tok: list[float]

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "y_bin": int(self.y_bin),
                "y_mul": [float(v) for v in self.y_mul],
                "y_box": [float(v) for v in self.y_box],
                "y_tok": [int(v) for v in self.y_tok],
                "s_bin": float(self.s_bin),
                "s_mul": [float(v) for v in self.s_mul],
                "s_box": [float(v) for v in self.s_box],
                "s_tok": [float(v) for v in self.s_tok],
            }
        )

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRecord":
        return cls(**{k: d[k] for k in ("id", "y_bin", "y_mul", "y_box", "y_tok", "s_bin", "s_mul", "s_box", "s_tok")})


def write_records(path, records) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path) -> list[EvalRecord]:
    with Path(path).open(encoding="utf-8") as fh:
        return [EvalRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def _binary_inputs(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have the same length")
    if y.all() or not y.any():
        raise UndefinedMetricError("both classes must be present")
    return s, y


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties 1/2),
    computed from mid-ranks."""
    s, y = _binary_inputs(scores, labels)
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    # average rank per tie group
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_s)) + 1]
    ends = np.r_[starts[1:], len(s)]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + b + 1) / 2.0
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) for thresholds ``+inf`` and each distinct score, descending;
    a sample is called positive when its score is >= the threshold."""
    s, y = _binary_inputs(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(~y)[last_of_group]
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    return fpr, tpr


def eer(scores, labels) -> float:
    """Equal error rate on the ROC polyline (linear between adjacent points)."""
    fpr, tpr = roc_points(scores, labels)
    diff = fpr - (1.0 - tpr)  # -1 at the start, +1 at the end
    idx = int(np.flatnonzero(diff >= 0)[0])
    if diff[idx] == 0 or idx == 0:
        return float(fpr[idx])
    d0, d1 = diff[idx - 1], diff[idx]
    t = d0 / (d0 - d1)
    return float(fpr[idx - 1] + t * (fpr[idx] - fpr[idx - 1]))


def acc(scores, labels, threshold: float = 0.5) -> float:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.size == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return float(((s >= threshold) == y).mean())


def average_precision(scores, labels) -> float:
    """Mean of precision@rank over the positives' ranks (stable descending order)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if not y.any():
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    hits = y[order]
    precision_at = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision_at[hits].mean())


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _div(a, b) -> float:
    return float(a) / float(b) if b else 0.0


def map_cf1_of1(scores, labels, threshold: float = 0.5) -> tuple[float, float, float]:
    """Multi-label mAP plus per-class (CF1) and overall (OF1) F1.

    CF1 is the harmonic mean of the class-averaged precision and recall, OF1
    the harmonic mean of precision and recall pooled over all classes.
    Classes without positives are left out of mAP; 0/0 counts as 0.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    aps = [average_precision(s[:, k], y[:, k]) for k in range(s.shape[1]) if y[:, k].any()]
    m_ap = float(np.mean(aps)) if aps else 0.0
    pred = s >= threshold
    tp = (pred & y).sum(0)
    fp = (pred & ~y).sum(0)
    fn = (~pred & y).sum(0)
    cp = float(np.mean([_div(tp[k], tp[k] + fp[k]) for k in range(s.shape[1])]))
    cr = float(np.mean([_div(tp[k], tp[k] + fn[k]) for k in range(s.shape[1])]))
    op = _div(tp.sum(), tp.sum() + fp.sum())
    orc = _div(tp.sum(), tp.sum() + fn.sum())
    return m_ap, _f1(cp, cr), _f1(op, orc)


def iou(box_a, box_b) -> float:
    """IoU of two normalized ``(cx, cy, w, h)`` boxes."""
    ax, ay, aw, ah = (float(v) for v in box_a)
    bx, by, bw, bh = (float(v) for v in box_b)
    a = (ax - aw / 2, ay - ah / 2, ax + aw / 2, ay + ah / 2)
    b = (bx - bw / 2, by - bh / 2, bx + bw / 2, by + bh / 2)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def has_image_box(box) -> bool:
    return any(float(v) != 0.0 for v in box)


def grounding_metrics(records, include_pristine: bool = False) -> tuple[float, float, float]:
    """IoUmean, IoU50, IoU75 over samples with an image-manipulation box."""
    ious = [
        iou(r.s_box, r.y_box) for r in records if include_pristine or has_image_box(r.y_box)
    ]
    if not ious:
        return float("nan"), float("nan"), float("nan")
    v = np.asarray(ious)
    return float(v.mean()), float((v >= 0.5).mean()), float((v >= 0.75).mean())


def token_prf(pred_tok_scores, y_tok, threshold: float = 0.5) -> tuple[float, float, float]:
    """Micro precision/recall/F1 over all real tokens; positive = manipulated.

    Inputs are sequences (one per sample) of per-token scores and labels.
    """
    tp = fp = fn = 0
    for s, y in zip(pred_tok_scores, y_tok):
        s = np.asarray(s, dtype=np.float64)
        y = np.asarray(y).astype(bool)
        pred = s >= threshold
        tp += int((pred & y).sum())
        fp += int((pred & ~y).sum())
        fn += int((~pred & y).sum())
    p, r = _div(tp, tp + fp), _div(tp, tp + fn)
    return p, r, _f1(p, r)


def per_type_f1(records, threshold: float = 0.5) -> dict[str, float]:
    """F1 of each manipulation type's detector (multi-label head at threshold)."""
    s = np.asarray([r.s_mul for r in records], dtype=np.float64)
    y = np.asarray([r.y_mul for r in records]).astype(bool)
    out = {}
    for k, name in enumerate(TYPES):
        pred = s[:, k] >= threshold
        tp = int((pred & y[:, k]).sum())
        fp = int((pred & ~y[:, k]).sum())
        fn = int((~pred & y[:, k]).sum())
        out[name] = _f1(_div(tp, tp + fp), _div(tp, tp + fn))
    return out


def metric_table(records) -> dict[str, float]:
    """All twelve metrics, as fractions in [0, 1]."""
    s_bin = [r.s_bin for r in records]
    y_bin = [r.y_bin for r in records]
    table = {}
    try:
        table["AUC"] = auc(s_bin, y_bin)
        table["EER"] = eer(s_bin, y_bin)
    except UndefinedMetricError:
        table["AUC"] = table["EER"] = float("nan")
    table["ACC"] = acc(s_bin, y_bin)
    table["mAP"], table["CF1"], table["OF1"] = map_cf1_of1([r.s_mul for r in records], [r.y_mul for r in records])
    table["IoUmean"], table["IoU50"], table["IoU75"] = grounding_metrics(records)
    table["Precision"], table["Recall"], table["F1"] = token_prf([r.s_tok for r in records], [r.y_tok for r in records])
    return {k: table[k] for k in METRIC_KEYS}
