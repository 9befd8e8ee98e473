"""Cluster-to-class alignment and the per-class / averaged metric suite."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from dceac.utils import atomic_write

METRICS = ("SN", "SP", "FS", "ACC", "AUC")


def confusion_matrix(truth, pred, k):
    """Rows are true classes, columns predicted clusters."""
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape:
        raise ValueError("truth and pred differ in length")
    for name, v in (("truth", truth), ("pred", pred)):
        if v.size and (v.min() < 0 or v.max() >= k):
            raise ValueError(f"{name} labels must lie in [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def align_clusters(pred, truth, k):
    """Permutation ``perm`` with ``perm[cluster] = class`` maximising agreement."""
    cm = confusion_matrix(truth, pred, k)
    rows, cols = linear_sum_assignment(-cm.T)
    perm = np.empty(k, dtype=np.int64)
    perm[rows] = cols
    return perm


def _ratio(num, den):
    return None if den == 0 else num / den


def _mean(values):
    vals = [v for v in values if v is not None]
    return None if len(vals) != len(values) or not vals else float(np.mean(vals))


def auc_score(sn, sp):
    """Single-threshold AUC: the mean of sensitivity and specificity."""
    return None if sn is None or sp is None else (sn + sp) / 2


def per_class_metrics(cm):
    """One-vs-rest SN, SP, FS, ACC and AUC = (SN + SP) / 2 for each class.

    Undefined ratios (e.g. a class with no samples) are reported as None.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    out = []
    for j in range(cm.shape[0]):
        tp = int(cm[j, j])
        fn = int(cm[j].sum()) - tp
        fp = int(cm[:, j].sum()) - tp
        tn = total - tp - fn - fp
        sn = _ratio(tp, tp + fn)
        sp = _ratio(tn, tn + fp)
        out.append({
            "SN": sn,
            "SP": sp,
            "FS": _ratio(2 * tp, 2 * tp + fp + fn),
            "ACC": _ratio(tp + tn, total),
            "AUC": auc_score(sn, sp),
        })
    return out


def macro_average(per_class):
    return {m: _mean([c[m] for c in per_class]) for m in METRICS}


def micro_average(cm, per_class):
    """Pooled one-vs-rest counts; ACC and AUC are the class means as in the macro column."""
    cm = np.asarray(cm)
    k, total = cm.shape[0], cm.sum()
    acc = _ratio(float(np.trace(cm)), float(total))
    return {
        "SN": acc,
        "SP": None if acc is None else 1 - (1 - acc) / (k - 1),
        "FS": acc,
        "ACC": _mean([c["ACC"] for c in per_class]),
        "AUC": _mean([c["AUC"] for c in per_class]),
    }


@dataclass
class MetricsReport:
    confusion: list
    classes: list
    per_class: dict
    micro: dict
    macro: dict
    permutation: list | None = None

    def to_json(self, path):
        with atomic_write(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def compute_metrics(cm, classes=None, permutation=None):
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or (cm < 0).any():
        raise ValueError("confusion matrix must be square with non-negative counts")
    classes = list(classes) if classes is not None else [str(i) for i in range(cm.shape[0])]
    pc = per_class_metrics(cm)
    return MetricsReport(
        confusion=cm.tolist(),
        classes=classes,
        per_class=dict(zip(classes, pc)),
        micro=micro_average(cm, pc),
        macro=macro_average(pc),
        permutation=None if permutation is None else [int(v) for v in permutation],
    )


def evaluate(pred, truth, k, classes=None):
    """Align clusters to classes, then score the aligned confusion matrix."""
    perm = align_clusters(pred, truth, k)
    aligned = perm[np.asarray(pred, dtype=np.int64)]
    return compute_metrics(confusion_matrix(truth, aligned, k), classes, perm)


def aligned_accuracy(pred, truth, k):
    perm = align_clusters(pred, truth, k)
    return float(np.mean(perm[np.asarray(pred)] == np.asarray(truth)))


def write_confusion_csv(path, cm, classes):
    with atomic_write(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + list(classes))
        for name, row in zip(classes, np.asarray(cm).tolist()):
            w.writerow([name] + row)


def export_embeddings(params, data, labels=None, batch_size=32):
    """Table of pooled embeddings plus predicted and (optional) true label."""
    from dceac.clustering import predict_labels, soft_assign
    from dceac.network import embed

    z = embed(params, data, batch_size)
    pred = predict_labels(soft_assign(z, params.centers).data) if params.centers is not None else None
    return z, pred, labels


def write_embeddings_csv(path, z, pred, labels=None):
    c = z.shape[1]
    with atomic_write(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"z{i}" for i in range(c)] + ["pred", "label"])
        for i, row in enumerate(z):
            w.writerow([repr(float(v)) for v in row]
                       + ["" if pred is None else int(pred[i]),
                          "" if labels is None or labels[i] is None else labels[i]])
