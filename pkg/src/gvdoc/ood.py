"""Accuracy, confidence scores and in- vs out-of-distribution separability."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax
from scipy.stats import rankdata

from .errors import InvariantError

CONFIDENCE_TYPES = ("msp", "energy")
HIST_BINS = 50

REPORT_SCHEMA = {
    "type": "object",
    "required": ["accuracy", "auroc", "fpr95", "n_in", "n_ood"],
    "properties": {
        "accuracy": {
            "type": "object",
            "required": ["micro", "macro", "per_class"],
            "properties": {
                "micro": {"type": "number", "minimum": 0, "maximum": 1},
                "macro": {"type": "number", "minimum": 0, "maximum": 1},
                "per_class": {"type": "object",
                              "additionalProperties": {"type": "number", "minimum": 0,
                                                       "maximum": 1}},
            },
        },
        **{key: {
            "type": "object",
            "required": list(CONFIDENCE_TYPES),
            "properties": {c: {
                "type": "object", "required": ["micro", "macro"],
                "properties": {"micro": {"type": "number", "minimum": 0, "maximum": 1},
                               "macro": {"type": "number", "minimum": 0, "maximum": 1}},
            } for c in CONFIDENCE_TYPES},
        } for key in ("auroc", "fpr95")},
        "n_in": {"type": "integer", "minimum": 1},
        "n_ood": {"type": "integer", "minimum": 1},
    },
}


def _logits(z):
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise InvariantError("logits must be finite")
    if z.shape[-1] < 2:
        raise InvariantError("need at least 2 classes")
    return z


def msp(logits):
    """Maximum softmax probability; accepts ``(C,)`` or ``(B, C)``."""
    return softmax(_logits(logits), axis=-1).max(-1)


def energy(logits, T=1.0):
    """Energy score ``-T * logsumexp(z / T)``; lower means more in-distribution."""
    if not T > 0:
        raise InvariantError("temperature must be > 0")
    return -T * logsumexp(_logits(logits) / T, axis=-1)


def confidences(logits, T=1.0):
    """Higher-is-in-distribution scores: MSP and negative energy."""
    return {"msp": msp(logits), "energy": -energy(logits, T)}


def accuracy(preds, labels, num_classes):
    """Micro accuracy, macro accuracy over classes present, per-class accuracy."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise InvariantError(f"{len(preds)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        raise InvariantError("accuracy of an empty set")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise InvariantError(f"labels outside [0, {num_classes})")
    correct = preds == labels
    per_class = {c: float(correct[labels == c].mean())
                 for c in range(num_classes) if (labels == c).any()}
    return float(correct.mean()), float(np.mean(list(per_class.values()))), per_class


def _pair(pos, neg):
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise InvariantError("positive and negative score lists must be non-empty")
    return pos, neg


def auroc(pos_scores, neg_scores):
    """Mann-Whitney AUROC: P(pos > neg) + 0.5 P(pos == neg), via ranking."""
    pos, neg = _pair(pos_scores, neg_scores)
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2
    return float(u / (len(pos) * len(neg)))


def fpr_at_95_tpr(pos_scores, neg_scores, tpr=0.95):
    """FPR at the largest threshold ``t`` with ``|{p >= t}| / |P| >= tpr``."""
    pos, neg = _pair(pos_scores, neg_scores)
    need = int(np.ceil(tpr * len(pos) - 1e-9))
    t = np.sort(pos)[::-1][max(need, 1) - 1]
    return float(np.mean(neg >= t))


def roc_curve(pos_scores, neg_scores):
    """ROC points ``(fpr, tpr)`` swept over every distinct score, from (0, 0)."""
    pos, neg = _pair(pos_scores, neg_scores)
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    fpr = np.array([0.0] + [np.mean(neg >= t) for t in thresholds])
    tpr = np.array([0.0] + [np.mean(pos >= t) for t in thresholds])
    return fpr, tpr


def histogram_rows(conf_in, conf_ood, bins=HIST_BINS, value_range=None):
    """Rows ``(split, bin_left, bin_right, count)`` on shared uniform bins."""
    pooled = np.concatenate([conf_in, conf_ood])
    lo, hi = value_range if value_range else (pooled.min(), pooled.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    rows = []
    for split, values in (("in", conf_in), ("ood", conf_ood)):
        counts, _ = np.histogram(values, bins=edges)
        rows.extend((split, float(edges[b]), float(edges[b + 1]), int(counts[b]))
                    for b in range(bins))
    return rows


@dataclass
class EvalReport:
    per_class: dict
    micro: float
    macro: float
    conf_in: dict
    conf_ood: dict
    auroc: dict
    fpr95: dict
    n_in: int
    n_ood: int
    histograms: dict = field(default_factory=dict)
    roc: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        out = {
            "accuracy": {"micro": self.micro, "macro": self.macro,
                         "per_class": {str(k): v for k, v in self.per_class.items()}},
            "auroc": self.auroc,
            "fpr95": self.fpr95,
            "n_in": self.n_in,
            "n_ood": self.n_ood,
        }
        out.update(self.extra)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_histogram_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split", "confidence_type", "bin_left", "bin_right", "count"])
            for ctype in CONFIDENCE_TYPES:
                for split, left, right, count in self.histograms[ctype]:
                    w.writerow([split, ctype, repr(left), repr(right), count])

    def write_roc_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["confidence_type", "fpr", "tpr"])
            for ctype in CONFIDENCE_TYPES:
                fpr, tpr = self.roc[ctype]
                for f, t in zip(fpr, tpr):
                    w.writerow([ctype, repr(float(f)), repr(float(t))])


def evaluate_logits(in_logits, in_labels, ood_logits, num_classes, T=1.0, extra=None):
    """Build an :class:`EvalReport` from class logits of both splits.

    Micro AUROC/FPR95 pool all in-test samples against all OOD samples; macro
    averages, over in-domain classes, the metric of that class's in-test
    samples against all OOD samples.
    """
    in_logits, ood_logits = _logits(in_logits), _logits(ood_logits)
    in_labels = np.asarray(in_labels)
    if len(in_logits) == 0 or len(ood_logits) == 0:
        raise InvariantError("both in-distribution and OOD splits must be non-empty")
    micro, macro, per_class = accuracy(in_logits.argmax(1), in_labels, num_classes)
    conf_in, conf_ood = confidences(in_logits, T), confidences(ood_logits, T)
    return evaluate_confidences(conf_in, in_labels, conf_ood, num_classes,
                                accuracy_block=(micro, macro, per_class), extra=extra)


def evaluate_confidences(conf_in, in_labels, conf_ood, num_classes, accuracy_block=None,
                         extra=None):
    """Separability metrics from precomputed confidence arrays per type."""
    in_labels = np.asarray(in_labels)
    au, fp, hist, roc = {}, {}, {}, {}
    missing = [c for c in range(num_classes) if not (in_labels == c).any()]
    if missing:
        warnings.warn(f"classes {missing} have no in-distribution test samples; "
                      "skipped from macro metrics", stacklevel=2)
    for ctype in CONFIDENCE_TYPES:
        ci, co = np.asarray(conf_in[ctype]), np.asarray(conf_ood[ctype])
        per_au = [auroc(ci[in_labels == c], co) for c in range(num_classes) if c not in missing]
        per_fp = [fpr_at_95_tpr(ci[in_labels == c], co) for c in range(num_classes)
                  if c not in missing]
        au[ctype] = {"micro": auroc(ci, co), "macro": float(np.mean(per_au))}
        fp[ctype] = {"micro": fpr_at_95_tpr(ci, co), "macro": float(np.mean(per_fp))}
        hist[ctype] = histogram_rows(ci, co, value_range=(0.0, 1.0) if ctype == "msp" else None)
        roc[ctype] = roc_curve(ci, co)
    micro, macro, per_class = accuracy_block if accuracy_block else (float("nan"),) * 2 + ({},)
    return EvalReport(per_class=per_class, micro=micro, macro=macro,
                      conf_in={k: np.asarray(v) for k, v in conf_in.items()},
                      conf_ood={k: np.asarray(v) for k, v in conf_ood.items()},
                      auroc=au, fpr95=fp, n_in=len(in_labels),
                      n_ood=len(np.asarray(conf_ood["msp"])), histograms=hist, roc=roc,
                      extra=dict(extra or {}))


def evaluate(params, mcfg, in_graphs, ood_graphs, T=1.0, extra=None):
    """Run the classifier on both splits and compute the full report."""
    from .train import predict_logits

    labels = [g.label for g in in_graphs]
    if any(lab is None for lab in labels):
        raise InvariantError("in-distribution test graphs need labels")
    return evaluate_logits(predict_logits(in_graphs, params, mcfg), labels,
                           predict_logits(ood_graphs, params, mcfg), mcfg.num_classes, T,
                           extra=extra)
