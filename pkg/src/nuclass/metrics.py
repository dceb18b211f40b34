"""Evaluation metrics: confusion scores, calibration, ranking, cluster
geometry, and percentile-bootstrap confidence intervals.

Everything is plain numpy over immutable prediction arrays. Conventions
follow the classical definitions: multiclass Brier sums over classes, ECE
uses equal-width confidence bins, one-vs-rest AUROC uses the rank statistic
with ties counted half, and micro-F1 equals accuracy for single-label data.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .seeding import substream

DEFAULT_ECE_BINS = 15
DEFAULT_BOOTSTRAP_B = 1000


def confusion(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Counts with rows = truth, columns = prediction."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("truth and prediction lengths disagree")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0
                        or max(y_true.max(), y_pred.max()) >= n_classes):
        raise ValueError("label outside the class range")
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (y_true, y_pred), 1)
    return out


def f1_scores(conf: np.ndarray) -> tuple[np.ndarray, float, float]:
    """(per-class F1, macro, micro) from a confusion matrix.

    A class present in neither truth nor predictions gets F1 = 0 and is
    left out of the macro average; a class present in truth but never
    predicted contributes its 0. Micro-F1 is trace/total, i.e. accuracy.
    """
    conf = np.asarray(conf, dtype=np.float64)
    total = conf.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(conf)
    truth = conf.sum(axis=1)
    pred = conf.sum(axis=0)
    denom = truth + pred
    with np.errstate(divide="ignore", invalid="ignore"):
        f1 = np.where(denom > 0, 2.0 * tp / np.maximum(denom, 1e-300), 0.0)
    active = denom > 0
    macro = float(f1[active].mean()) if active.any() else 0.0
    micro = float(tp.sum() / total)
    return f1, macro, micro


@dataclass(frozen=True)
class ReliabilityBins:
    edges: np.ndarray
    mean_confidence: np.ndarray
    accuracy: np.ndarray
    count: np.ndarray


def ece(confidences, correct, n_bins: int = DEFAULT_ECE_BINS) -> tuple[float, ReliabilityBins]:
    """Expected calibration error over equal-width bins on top-1 confidence.

    Bin b covers (b/B, (b+1)/B], except the first which also includes 0.
    Empty bins contribute nothing.
    """
    if n_bins < 1:
        raise ValueError("need at least one bin")
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct, dtype=np.float64)
    if conf.shape != corr.shape or conf.ndim != 1:
        raise ValueError("confidences and correctness must be aligned vectors")
    n = conf.size
    if n == 0:
        raise ValueError("no samples")
    idx = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    count = np.bincount(idx, minlength=n_bins).astype(np.float64)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    corr_sum = np.bincount(idx, weights=corr, minlength=n_bins)
    with np.errstate(invalid="ignore"):
        mean_conf = np.where(count > 0, conf_sum / np.maximum(count, 1), 0.0)
        acc = np.where(count > 0, corr_sum / np.maximum(count, 1), 0.0)
    gap = np.abs(acc - mean_conf)
    value = float(np.sum(count / n * gap))
    bins = ReliabilityBins(edges=np.linspace(0.0, 1.0, n_bins + 1),
                           mean_confidence=mean_conf, accuracy=acc,
                           count=count.astype(np.int64))
    return value, bins


def brier(p, y) -> float:
    """Mean over samples of the squared distance to the one-hot truth
    (summed over classes)."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if p.shape[0] != y.size:
        raise ValueError("lengths disagree")
    onehot = np.zeros_like(p)
    onehot[np.arange(y.size), y] = 1.0
    return float(((p - onehot) ** 2).sum(axis=1).mean())


def _auc_rank(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC with average ranks (ties count half)."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty_like(scores)
    ranks[order] = np.arange(1, scores.size + 1, dtype=np.float64)
    # average the ranks within tie groups
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    rank_sum = float(ranks[positive].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auroc_ovr_macro(p, y) -> float:
    """Macro average of one-vs-rest AUROC over classes that have both a
    positive and a negative sample; others are skipped with a warning."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    aucs = []
    for c in range(p.shape[1]):
        positive = y == c
        n_pos = int(positive.sum())
        if n_pos == 0 or n_pos == y.size:
            warnings.warn(f"class {c} lacks positives or negatives; skipped in AUROC")
            continue
        aucs.append(_auc_rank(p[:, c], positive))
    if not aucs:
        raise ValueError("no class has both positive and negative samples")
    return float(np.mean(aucs))


def cluster_geometry(features, labels) -> tuple[float, float, float]:
    """(silhouette, Calinski-Harabasz, Davies-Bouldin), Euclidean metric."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if x.shape[0] != y.size:
        raise ValueError("features and labels lengths disagree")
    classes = np.unique(y)
    k = classes.size
    n = y.size
    if k < 2:
        raise ValueError("cluster metrics need at least 2 clusters")

    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))

    # silhouette
    sil = np.zeros(n)
    for i in range(n):
        same = y == y[i]
        n_same = int(same.sum())
        if n_same <= 1:
            sil[i] = 0.0
            continue
        a = dist[i, same].sum() / (n_same - 1)
        b = np.inf
        for c in classes:
            if c == y[i]:
                continue
            b = min(b, dist[i, y == c].mean())
        sil[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    silhouette = float(sil.mean())

    # Calinski-Harabasz
    mu = x.mean(axis=0)
    within = 0.0
    between = 0.0
    centroids = {}
    for c in classes:
        members = x[y == c]
        mu_c = members.mean(axis=0)
        centroids[int(c)] = mu_c
        within += float(((members - mu_c) ** 2).sum())
        between += members.shape[0] * float(((mu_c - mu) ** 2).sum())
    if within == 0.0:
        ch = np.inf
    else:
        ch = (between / (k - 1)) / (within / (n - k))

    # Davies-Bouldin
    spread = {}
    for c in classes:
        members = x[y == c]
        spread[int(c)] = float(np.sqrt(((members - centroids[int(c)]) ** 2).sum(axis=1)).mean())
    db_terms = []
    for ci in classes:
        worst = 0.0
        for cj in classes:
            if ci == cj:
                continue
            d = float(np.sqrt(((centroids[int(ci)] - centroids[int(cj)]) ** 2).sum()))
            if d == 0:
                worst = np.inf
                break
            worst = max(worst, (spread[int(ci)] + spread[int(cj)]) / d)
        db_terms.append(worst)
    db = float(np.mean(db_terms))
    return silhouette, float(ch), db


# ---------------------------------------------------------------------------
# bootstrap


def bootstrap_ci(
    metric_of_indices: Callable[[np.ndarray], float],
    n: int,
    b: int = DEFAULT_BOOTSTRAP_B,
    seed: int = 0,
) -> tuple[float, float, float]:
    """Percentile bootstrap: B resamples with replacement of size n.

    Returns (mean over resamples, 2.5th percentile, 97.5th percentile).
    Each resample draws from its own deterministic substream of `seed`, so
    the triple is reproducible and resamples could run in any order.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    values = np.empty(b)
    for i in range(b):
        rng = substream(seed, "bootstrap", str(i))
        idx = rng.integers(0, n, size=n)
        values[i] = metric_of_indices(idx)
    lo, hi = np.quantile(values, [0.025, 0.975])
    return float(values.mean()), float(lo), float(hi)


def format_ci(mean: float, lo: float, hi: float, digits: int = 4) -> str:
    return f"{mean:.{digits}f} ({lo:.{digits}f}, {hi:.{digits}f})"


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    """Point metrics plus bootstrap intervals for a scored prediction set."""

    class_names: tuple[str, ...]
    n_samples: int
    per_class_f1: dict[str, float]
    macro_f1: float
    micro_f1: float
    accuracy: float
    ece: float
    brier: float
    auroc: float | None
    cluster: dict[str, float] = field(default_factory=dict)
    ci: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        doc = {
            "class_names": list(self.class_names),
            "n_samples": self.n_samples,
            "per_class_f1": {k: self.per_class_f1[k] for k in sorted(self.per_class_f1)},
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            "accuracy": self.accuracy,
            "ece": self.ece,
            "brier": self.brier,
            "auroc": self.auroc,
            "cluster": {k: self.cluster[k] for k in sorted(self.cluster)},
            "ci": {
                k: {"mean": v[0], "lower": v[1], "upper": v[2],
                    "formatted": format_ci(*v)}
                for k, v in sorted(self.ci.items())
            },
        }
        doc.update(self.extra)
        return doc


def build_report(
    p_eval: np.ndarray,
    y_eval: np.ndarray,
    class_names: Sequence[str],
    features: np.ndarray | None = None,
    bootstrap_metrics: Sequence[str] = ("accuracy", "macro_f1", "micro_f1"),
    b: int = DEFAULT_BOOTSTRAP_B,
    seed: int = 0,
    ece_bins: int = DEFAULT_ECE_BINS,
) -> MetricReport:
    """Score a prediction set; y_eval entries < 0 (dropped) are excluded."""
    p = np.atleast_2d(np.asarray(p_eval, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y_eval, dtype=np.int64))
    keep = y >= 0
    p, y = p[keep], y[keep]
    if features is not None:
        features = np.asarray(features)[keep]
    if y.size == 0:
        raise ValueError("no scored samples after dropping unmapped labels")
    c = len(class_names)
    pred = p.argmax(axis=1)
    conf_matrix = confusion(y, pred, c)
    per_class, macro, micro = f1_scores(conf_matrix)
    acc = float((pred == y).mean())
    ece_val, _ = ece(p.max(axis=1), (pred == y).astype(float), n_bins=ece_bins)
    brier_val = brier(p, y)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            auroc_val = auroc_ovr_macro(p, y)
    except ValueError:
        auroc_val = None

    cluster: dict[str, float] = {}
    if features is not None and np.unique(y).size >= 2:
        sil, ch, db = cluster_geometry(features, y)
        cluster = {"silhouette": sil, "calinski_harabasz": ch, "davies_bouldin": db}

    metric_fns: dict[str, Callable[[np.ndarray], float]] = {
        "accuracy": lambda idx: float((pred[idx] == y[idx]).mean()),
        "macro_f1": lambda idx: f1_scores(confusion(y[idx], pred[idx], c))[1],
        "micro_f1": lambda idx: f1_scores(confusion(y[idx], pred[idx], c))[2],
        "ece": lambda idx: ece(p[idx].max(axis=1),
                               (pred[idx] == y[idx]).astype(float), ece_bins)[0],
        "brier": lambda idx: brier(p[idx], y[idx]),
    }
    ci = {}
    for name in bootstrap_metrics:
        if name not in metric_fns:
            raise ValueError(f"no bootstrap support for metric {name!r}")
        ci[name] = bootstrap_ci(metric_fns[name], y.size, b=b, seed=seed)

    return MetricReport(
        class_names=tuple(class_names),
        n_samples=int(y.size),
        per_class_f1={name: float(per_class[i]) for i, name in enumerate(class_names)},
        macro_f1=macro,
        micro_f1=micro,
        accuracy=acc,
        ece=ece_val,
        brier=brier_val,
        auroc=auroc_val,
        cluster=cluster,
        ci=ci,
    )


def report_to_json(report: MetricReport) -> str:
    return json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"


def report_from_json_dict(doc: dict) -> MetricReport:
    """Inverse of to_json_dict; unknown keys land back in `extra`.

    Lets a finished report file be re-rendered to the other formats without
    recomputing anything.
    """
    known = {"class_names", "n_samples", "per_class_f1", "macro_f1", "micro_f1",
             "accuracy", "ece", "brier", "auroc", "cluster", "ci"}
    for key in sorted(known - {"cluster", "ci"}):
        if key not in doc:
            raise ValueError(f"report document missing {key!r}")
    ci = {k: (v["mean"], v["lower"], v["upper"])
          for k, v in doc.get("ci", {}).items()}
    extra = {k: v for k, v in doc.items() if k not in known}
    return MetricReport(
        class_names=tuple(doc["class_names"]),
        n_samples=int(doc["n_samples"]),
        per_class_f1=dict(doc["per_class_f1"]),
        macro_f1=float(doc["macro_f1"]),
        micro_f1=float(doc["micro_f1"]),
        accuracy=float(doc["accuracy"]),
        ece=float(doc["ece"]),
        brier=float(doc["brier"]),
        auroc=None if doc["auroc"] is None else float(doc["auroc"]),
        cluster=dict(doc.get("cluster", {})),
        ci=ci,
        extra=extra,
    )


def _report_rows(report: MetricReport) -> list[list[str]]:
    rows = [["row", "metric", "value"]]
    for name in report.class_names:
        rows.append(["class", f"f1[{name}]", f"{report.per_class_f1[name]:.6f}"])
    for key in ("macro_f1", "micro_f1", "accuracy", "ece", "brier"):
        rows.append(["summary", key, f"{getattr(report, key):.6f}"])
    if report.auroc is not None:
        rows.append(["summary", "auroc", f"{report.auroc:.6f}"])
    for key in sorted(report.cluster):
        rows.append(["summary", key, f"{report.cluster[key]:.6f}"])
    for key, triple in sorted(report.ci.items()):
        rows.append(["ci", key, format_ci(*triple)])
    return rows


def report_to_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(_report_rows(report))
    return buf.getvalue()


def report_to_markdown(report: MetricReport) -> str:
    rows = _report_rows(report)
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = []
    header, body = rows[0], rows[1:]
    lines.append("| " + " | ".join(h.ljust(w) for h, w in zip(header, widths)) + " |")
    lines.append("| " + " | ".join("-" * w for w in widths) + " |")
    for r in body:
        lines.append("| " + " | ".join(v.ljust(w) for v, w in zip(r, widths)) + " |")
    return "\n".join(lines) + "\n"
