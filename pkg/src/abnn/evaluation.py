"""Uncertainty scoring and detection / clustering metrics.

Uncertainty is u = 1 - max mean softmax, so higher always means more
uncertain. Detection metrics follow the standard OOD evaluation set (TNR
at 95% TPR, AUROC, detection accuracy, AUPR-in/out) with OOD as the
positive class on uncertainty scores; the three-way metric pools trimmed
ID / semi-OOD / full-OOD scores and clusters them with deterministic 1-D
3-means.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .model import AbnnModel, predict_mc, predict_mean
from .numerics import Rng


def _scores(a, name) -> np.ndarray:
    s = np.asarray(a, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError(f"{name} score set is empty")
    if not np.all(np.isfinite(s)):
        raise ValueError(f"{name} scores contain non-finite values")
    return s


def uncertainty_scores(model: AbnnModel, x, n_samples: int, rng: Rng, stochastic: bool = True) -> np.ndarray:
    """u_i = 1 - max_k of the (MC-mean) predictive distribution."""
    if stochastic:
        probs = predict_mc(model, x, n_samples, rng)
    else:
        probs = predict_mean(model, x)
    return 1.0 - probs.max(axis=1)


def auroc(neg, pos) -> float:
    """Rank-based AUROC (Mann-Whitney, ties counted half).

    neg are the ID scores, pos the OOD scores; equals the fraction of
    (pos, neg) pairs ordered pos > neg, ties worth 1/2.
    """
    neg = _scores(neg, "neg")
    pos = _scores(pos, "pos")
    both = np.concatenate([neg, pos])
    uniq, inv, counts = np.unique(both, return_inverse=True, return_counts=True)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    avg_rank = starts + (counts + 1) / 2.0  # 1-based mid-ranks
    ranks = avg_rank[inv]
    m = pos.size
    u = ranks[neg.size :].sum() - m * (m + 1) / 2.0
    return float(u / (neg.size * m))


def tnr_at_tpr95(neg, pos, tpr: float = 0.95) -> float:
    """TNR at the largest threshold keeping TPR >= 0.95.

    Scores >= threshold are flagged OOD; the threshold is the k-th largest
    positive score with k = ceil(tpr * |pos|).
    """
    neg = _scores(neg, "neg")
    pos = _scores(pos, "pos")
    k = math.ceil(tpr * pos.size)
    t = np.sort(pos)[pos.size - k]
    return float((neg < t).mean())


def detection_accuracy(neg, pos) -> float:
    """Best 0.5 * (TPR + TNR) over midpoint thresholds of observed scores."""
    neg = _scores(neg, "neg")
    pos = _scores(pos, "pos")
    uniq = np.unique(np.concatenate([neg, pos]))
    cands = np.concatenate(([uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0, [uniq[-1] + 1.0]))
    neg_sorted = np.sort(neg)
    pos_sorted = np.sort(pos)
    tpr = 1.0 - np.searchsorted(pos_sorted, cands, side="left") / pos.size
    tnr = np.searchsorted(neg_sorted, cands, side="left") / neg.size
    return float((0.5 * (tpr + tnr)).max())


def aupr(neg, pos, positive_is: str = "out") -> float:
    """Average precision of the step-wise precision-recall curve.

    positive_is="out" treats OOD as positive ranked by score descending;
    "in" treats ID as positive with scores negated. At equal ranking
    scores negatives are placed first (pessimistic precision).
    """
    neg = _scores(neg, "neg")
    pos = _scores(pos, "pos")
    if positive_is == "out":
        labels = np.concatenate([np.zeros(neg.size), np.ones(pos.size)])
        rank_scores = np.concatenate([neg, pos])
    elif positive_is == "in":
        labels = np.concatenate([np.ones(neg.size), np.zeros(pos.size)])
        rank_scores = -np.concatenate([neg, pos])
    else:
        raise ValueError("positive_is must be 'in' or 'out'")
    order = np.lexsort((labels, -rank_scores))
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels)
    precision = tp / np.arange(1, sorted_labels.size + 1)
    n_pos = sorted_labels.sum()
    return float(precision[sorted_labels == 1].sum() / n_pos)


# ---- 1-D 3-means clustering metric ------------------------------------------------


def kmeans1d(values, k: int, n_iter: int = 100, tol: float = 1e-12):
    """Deterministic Lloyd iteration on scalars.

    Initialization is farthest-point traversal seeded at the minimum
    value, which is order-independent and keeps separated clusters
    nonempty. Returns (sorted centroids, assignments).
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size < 1:
        raise ValueError("values is empty")
    if v[0] == v[-1]:
        # All values identical: everything belongs to the first cluster.
        values = np.asarray(values, dtype=np.float64).ravel()
        return np.full(k, v[0]), np.zeros(values.size, dtype=np.int64)
    centroids = [v[0]]
    for _ in range(k - 1):
        dist = np.min(np.abs(v[:, None] - np.asarray(centroids)[None, :]), axis=1)
        centroids.append(v[int(np.argmax(dist))])
    c = np.sort(np.asarray(centroids))
    values = np.asarray(values, dtype=np.float64).ravel()
    assign = _assign1d(values, c)
    for _ in range(n_iter):
        new_c = c.copy()
        for j in range(k):
            sel = assign == j
            if np.any(sel):
                new_c[j] = values[sel].mean()
        new_c = np.sort(new_c)
        assign = _assign1d(values, new_c)
        if np.max(np.abs(new_c - c)) < tol:
            c = new_c
            break
        c = new_c
    return c, assign


def _assign1d(values, centroids_sorted):
    boundaries = (centroids_sorted[:-1] + centroids_sorted[1:]) / 2.0
    # Ties at a boundary go to the lower cluster.
    return np.searchsorted(boundaries, values, side="left")


def cluster3(scores_id, scores_semi, scores_full, trim: float = 0.01):
    """Three-way clustering accuracy over pooled uncertainty scores.

    Trims the given fraction from each tail of each set, pools the rest,
    runs 1-D 3-means, labels clusters by ascending centroid as
    (ID, SEMI, FULL), and returns (3x3 confusion counts, trace accuracy).
    Confusion rows are origins, columns assigned clusters.
    """
    if not (0.0 <= trim < 0.5):
        raise ValueError("trim must be in [0, 0.5)")
    sets = []
    for name, s in (("id", scores_id), ("semi", scores_semi), ("full", scores_full)):
        s = np.sort(_scores(s, name))
        k = int(trim * s.size)
        s = s[k : s.size - k] if k > 0 else s
        if s.size == 0:
            raise ValueError(f"{name} score set is empty after trimming")
        sets.append(s)
    pooled = np.concatenate(sets)
    origins = np.concatenate([np.full(s.size, i) for i, s in enumerate(sets)])
    _, assign = kmeans1d(pooled, 3)
    confusion = np.zeros((3, 3), dtype=np.int64)
    for o, a in zip(origins, assign):
        confusion[o, a] += 1
    accuracy = float(np.trace(confusion) / confusion.sum())
    return confusion, accuracy


# ---- report assembly ----------------------------------------------------------------


def detection_report(scores_id, scores_ood) -> dict:
    """The five standard detection metrics, OOD as positive."""
    return {
        "tnr_at_tpr95": tnr_at_tpr95(scores_id, scores_ood),
        "auroc": auroc(scores_id, scores_ood),
        "detection_accuracy": detection_accuracy(scores_id, scores_ood),
        "aupr_in": aupr(scores_id, scores_ood, "in"),
        "aupr_out": aupr(scores_id, scores_ood, "out"),
    }


def misclassification_report(model: AbnnModel, x, labels, n_samples: int, rng: Rng, stochastic: bool = True) -> dict:
    """Error-detection metrics from uncertainty scores.

    Correctness flags come from the mean-network argmax; misclassified
    samples are the positive class. Metrics that need a nonempty error
    (or success) set are reported as None when that set is empty.
    """
    labels = np.asarray(labels, dtype=np.int64)
    preds = predict_mean(model, x).argmax(axis=1)
    correct = preds == labels
    scores = uncertainty_scores(model, x, n_samples, rng, stochastic=stochastic)
    out = {"accuracy": float(correct.mean()), "n_errors": int((~correct).sum())}
    succ, err = scores[correct], scores[~correct]
    if succ.size == 0 or err.size == 0:
        out.update(
            {"tnr_at_tpr95": None, "auroc": None, "detection_accuracy": None, "aupr_succ": None, "aupr_err": None}
        )
        return out
    out.update(
        {
            "tnr_at_tpr95": tnr_at_tpr95(succ, err),
            "auroc": auroc(succ, err),
            "detection_accuracy": detection_accuracy(succ, err),
            "aupr_succ": aupr(succ, err, "in"),
            "aupr_err": aupr(succ, err, "out"),
        }
    )
    return out


@dataclass
class MetricsReport:
    """Detection / misclassification / clustering results with metadata."""

    mode: str
    seed: int
    n_samples_eval: int
    trim: float
    id_accuracy: float
    detection_full: dict
    detection_semi: dict
    misclassification: dict
    confusion3: list
    cluster_accuracy: float
    uncertainty_medians: dict
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "mode": self.mode,
            "seed": self.seed,
            "n_samples_eval": self.n_samples_eval,
            "trim": self.trim,
            "id_accuracy": self.id_accuracy,
            "detection": {"full_ood": self.detection_full, "semi_ood": self.detection_semi},
            "misclassification": self.misclassification,
            "cluster3": {"confusion": self.confusion3, "accuracy": self.cluster_accuracy},
            "uncertainty_medians": self.uncertainty_medians,
            "config": self.config,
        }


_RATE = {"type": ["number", "null"], "minimum": 0, "maximum": 1}
_DETECTION = {
    "type": "object",
    "required": ["tnr_at_tpr95", "auroc", "detection_accuracy", "aupr_in", "aupr_out"],
    "properties": {
        "tnr_at_tpr95": _RATE,
        "auroc": _RATE,
        "detection_accuracy": _RATE,
        "aupr_in": _RATE,
        "aupr_out": _RATE,
    },
}

REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "schema_version",
        "mode",
        "seed",
        "n_samples_eval",
        "trim",
        "id_accuracy",
        "detection",
        "misclassification",
        "cluster3",
        "uncertainty_medians",
        "config",
    ],
    "properties": {
        "schema_version": {"const": 1},
        "mode": {"type": "string"},
        "seed": {"type": "integer"},
        "n_samples_eval": {"type": "integer", "minimum": 1},
        "trim": {"type": "number", "minimum": 0, "exclusiveMaximum": 0.5},
        "id_accuracy": _RATE,
        "detection": {
            "type": "object",
            "required": ["full_ood", "semi_ood"],
            "properties": {"full_ood": _DETECTION, "semi_ood": _DETECTION},
        },
        "misclassification": {
            "type": "object",
            "required": ["accuracy", "n_errors"],
        },
        "cluster3": {
            "type": "object",
            "required": ["confusion", "accuracy"],
            "properties": {
                "confusion": {
                    "type": "array",
                    "minItems": 3,
                    "maxItems": 3,
                    "items": {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "integer"}},
                },
                "accuracy": _RATE,
            },
        },
        "uncertainty_medians": {"type": "object"},
        "config": {"type": "object"},
    },
}


def validate_report(doc: dict):
    import jsonschema

    jsonschema.validate(doc, REPORT_SCHEMA)


# ---- figure data -----------------------------------------------------------------


def write_ordered_curves(path, named_scores: dict):
    """CSV (dataset, rank, uncertainty): scores sorted ascending per dataset."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "rank", "uncertainty"])
        for name, scores in named_scores.items():
            for rank, u in enumerate(np.sort(np.asarray(scores, dtype=np.float64).ravel())):
                w.writerow([name, rank, repr(float(u))])


def write_histograms(path, named_scores: dict, n_bins: int = 20, lo: float = 0.0, hi: float = 1.0):
    """CSV (dataset, bin_left, bin_right, count) over a shared binning."""
    edges = np.linspace(lo, hi, n_bins + 1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "bin_left", "bin_right", "count"])
        for name, scores in named_scores.items():
            counts, _ = np.histogram(np.asarray(scores, dtype=np.float64).ravel(), bins=edges)
            for i, c in enumerate(counts):
                w.writerow([name, repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])
