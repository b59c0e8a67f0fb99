"""Evaluation mathematics: ranking metrics, test subpopulations, derived
score transforms, simulated readers, and the reader-model hybrid sweep.

ROC AUC is the exact Mann-Whitney statistic (ties count half) computed via
midranks. PR AUC uses a stepwise convention: precision is evaluated at
each achieved recall level with tie groups processed atomically and no
interpolation between points. Single-class inputs raise instead of
returning NaN.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class PredictionRecord:
    exam_id: str
    side: str              # L | R
    p_malignant: float
    p_benign: float
    model_id: str

    @property
    def breast_id(self):
        return f"{self.exam_id}:{self.side}"


def _midranks(values):
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels):
    """P(score_pos > score_neg) + 0.5 * P(tie), exact over all pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("roc_auc undefined: need both classes")
    ranks = _midranks(scores)
    r_pos = ranks[labels == 1].sum()
    u = r_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def pr_auc(scores, labels):
    """Area under the stepwise precision-recall curve."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise MetricError("pr_auc undefined: no positives")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    area = 0.0
    tp = 0
    fp = 0
    prev_recall = 0.0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        tp += int(y[i:j + 1].sum())
        fp += int((j - i + 1) - y[i:j + 1].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return area


def roc_curve_points(scores, labels):
    """(fpr, tpr) pairs over all distinct thresholds, ends included."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("roc curve undefined: need both classes")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    pts = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        tp += int(y[i:j + 1].sum())
        fp += (j - i + 1) - int(y[i:j + 1].sum())
        pts.append((fp / n_neg, tp / n_pos))
        i = j + 1
    return pts


def pr_curve_points(scores, labels):
    """(recall, precision) pairs over all distinct thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise MetricError("pr curve undefined: no positives")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    pts = []
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        tp += int(y[i:j + 1].sum())
        fp += (j - i + 1) - int(y[i:j + 1].sum())
        pts.append((tp / n_pos, tp / (tp + fp)))
        i = j + 1
    return pts


# ---------------------------------------------------------------------------
# populations

SUBPOPULATION_KINDS = ("screening", "biopsied", "reader_study",
                       "one_class_biopsied", "by_age", "by_density")


def subpopulation(records, kind, rng=None, reader_counts=(368, 372)):
    """Breast-id sets for an evaluation population over test-split records.

    Returns a set of "exam:side" ids, except for by_age / by_density which
    return a dict mapping attribute value to such a set.
    """
    test = [r for r in records if r.split == "test"]
    if kind == "screening":
        return {f"{r.exam_id}:{s}" for r in test for s in ("L", "R")}
    if kind == "biopsied":
        return {f"{r.exam_id}:{s}" for r in test for s in ("L", "R")
                if r.biopsied(s)}
    if kind == "one_class_biopsied":
        out = set()
        for r in test:
            for s in ("L", "R"):
                benign, malignant = r.labels(s)
                if r.biopsied(s) and benign + malignant == 1:
                    out.add(f"{r.exam_id}:{s}")
        return out
    if kind == "reader_study":
        if rng is None:
            raise MetricError("reader_study subpopulation needs an rng")
        biopsied_exams = [r for r in test
                          if r.left_biopsied or r.right_biopsied]
        clean_exams = [r for r in test
                       if not (r.left_biopsied or r.right_biopsied)]
        n_biopsied, n_clean = reader_counts
        if n_biopsied > len(biopsied_exams) or n_clean > len(clean_exams):
            raise MetricError(
                f"requested reader-study draw ({n_biopsied}+{n_clean}) exceeds "
                f"pools ({len(biopsied_exams)}+{len(clean_exams)})")
        pick_b = rng.choice(len(biopsied_exams), size=n_biopsied, replace=False)
        pick_c = rng.choice(len(clean_exams), size=n_clean, replace=False)
        exams = [biopsied_exams[i] for i in pick_b] + \
            [clean_exams[i] for i in pick_c]
        return {f"{r.exam_id}:{s}" for r in exams for s in ("L", "R")}
    if kind == "by_age":
        out = {}
        for r in test:
            for s in ("L", "R"):
                out.setdefault(r.age_band, set()).add(f"{r.exam_id}:{s}")
        return out
    if kind == "by_density":
        out = {}
        for r in test:
            for s in ("L", "R"):
                out.setdefault(r.density, set()).add(f"{r.exam_id}:{s}")
        return out
    raise MetricError(f"unknown subpopulation kind {kind!r}")


# ---------------------------------------------------------------------------
# derived scores

def biopsy_score(p_mal, p_ben):
    """Single score for "was any finding biopsied": max of the two heads."""
    return max(p_mal, p_ben)


def malignant_vs_benign_score(p_mal, p_ben):
    """Malignant probability renormalized over the two finding classes."""
    total = p_mal + p_ben
    if total <= 0:
        raise MetricError("malignant_vs_benign_score undefined for (0, 0)")
    return p_mal / total


def hybrid_scores(reader_scores, model_scores, lam):
    """Convex combination lam * reader + (1 - lam) * model, id-aligned."""
    if not 0.0 <= lam <= 1.0:
        raise MetricError("lambda must lie in [0, 1]")
    if set(reader_scores) != set(model_scores):
        raise MetricError("reader and model scores cover different breasts")
    return {k: lam * reader_scores[k] + (1.0 - lam) * model_scores[k]
            for k in reader_scores}


def hybrid_sweep(reader_scores, model_scores, labels, grid=None):
    """AUC and PR AUC along a lambda grid; returns (rows, best_lambda_auc).

    ``grid`` defaults to 0.00, 0.01, ..., 0.99.
    """
    if grid is None:
        grid = [round(0.01 * i, 2) for i in range(100)]
    keys = sorted(labels)
    y = [labels[k] for k in keys]
    rows = []
    for lam in grid:
        combined = hybrid_scores(reader_scores, model_scores, lam)
        s = [combined[k] for k in keys]
        rows.append((lam, roc_auc(s, y), pr_auc(s, y)))
    best = max(rows, key=lambda r: r[1])
    return rows, best[0]


# ---------------------------------------------------------------------------
# simulated readers

@dataclass
class ReaderMatrix:
    scores: np.ndarray        # readers x breasts, in [0, 1]
    breast_ids: list
    separations: list         # calibrated signal separation per reader
    noise_scales: list


def _reader_scores(labels01, separation, noise_scale, rng):
    z = separation * labels01 + noise_scale * rng.standard_normal(len(labels01))
    return 1.0 / (1.0 + np.exp(-z))


def simulate_readers(labels, targets, rng, noise_scale=1.0, tol=0.02,
                     max_iter=60):
    """Readers as noisy sigmoid scorers calibrated to target AUCs.

    ``labels`` maps breast id to 0/1; ``targets`` is one AUC target per
    reader. Separation is bisected until the realized AUC lands within
    ``tol`` of the target.
    """
    breast_ids = sorted(labels)
    y = np.array([labels[b] for b in breast_ids], dtype=np.float64)
    if len(set(y.tolist())) < 2:
        raise MetricError("reader simulation needs both classes")
    rows = []
    seps = []
    for ri, target in enumerate(targets):
        if not 0.5 <= target <= 0.999:
            raise MetricError(f"unattainable reader AUC target {target}")
        # gaussian score model: auc = Phi(sep / (noise * sqrt(2)))
        from math import sqrt
        sep = noise_scale * sqrt(2.0) * _probit(target)
        lo, hi = 0.0, max(4.0 * sep, 8.0)
        scores = None
        for _ in range(max_iter):
            draw_rng = np.random.default_rng(rng.integers(0, 2 ** 63))
            scores = _reader_scores(y, sep, noise_scale, draw_rng)
            auc = roc_auc(scores, y.astype(int))
            if abs(auc - target) <= tol:
                break
            if auc < target:
                lo = sep
                sep = (sep + hi) / 2.0
            else:
                hi = sep
                sep = (lo + sep) / 2.0
        else:
            raise MetricError(f"reader {ri}: calibration failed for {target}")
        rows.append(scores)
        seps.append(sep)
    return ReaderMatrix(scores=np.stack(rows), breast_ids=breast_ids,
                        separations=seps,
                        noise_scales=[noise_scale] * len(targets))


def _probit(p):
    # Acklam-style rational approximation is overkill; bisect the erf instead
    lo, hi = -8.0, 8.0
    for _ in range(80):
        mid = (lo + hi) / 2.0
        if 0.5 * (1.0 + math.erf(mid / math.sqrt(2.0))) < p:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


# ---------------------------------------------------------------------------
# prediction structure analysis

LABEL_ORDER = ("l_benign", "l_malignant", "r_benign", "r_malignant")


def prediction_correlations(records_by_exam):
    """Pearson correlations between the four per-exam prediction streams.

    ``records_by_exam`` maps exam_id to a dict with keys L/R holding
    (p_benign, p_malignant) pairs.
    """
    if len(records_by_exam) < 3:
        raise MetricError("need at least 3 exams for correlations")
    streams = {k: [] for k in LABEL_ORDER}
    for exam_id in sorted(records_by_exam):
        sides = records_by_exam[exam_id]
        streams["l_benign"].append(sides["L"][0])
        streams["l_malignant"].append(sides["L"][1])
        streams["r_benign"].append(sides["R"][0])
        streams["r_malignant"].append(sides["R"][1])
    mat = np.array([streams[k] for k in LABEL_ORDER])
    if (mat.std(axis=1) == 0).any():
        raise MetricError("zero-variance prediction stream")
    return np.corrcoef(mat)


# ---------------------------------------------------------------------------
# prediction CSV and activation export

PREDICTIONS_HEADER = "exam_id,side,p_malignant,p_benign,model_id"


def write_predictions(path, records):
    with open(path, "w", newline="") as f:
        f.write(PREDICTIONS_HEADER + "\n")
        for r in sorted(records, key=lambda r: (r.exam_id, r.side, r.model_id)):
            f.write(f"{r.exam_id},{r.side},{r.p_malignant:.6f},"
                    f"{r.p_benign:.6f},{r.model_id}\n")


def read_predictions(path):
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != PREDICTIONS_HEADER.split(","):
            raise MetricError(f"{path}: unexpected predictions header")
        for row in reader:
            out.append(PredictionRecord(
                exam_id=row["exam_id"], side=row["side"],
                p_malignant=float(row["p_malignant"]),
                p_benign=float(row["p_benign"]),
                model_id=row["model_id"]))
    return out


def export_activations(model, exams, data_dir, tap, path, heatmap_dir=None):
    """CSV of exam_id plus the concatenated activation vector at ``tap``."""
    from .training import exam_activations

    rows = []
    width = None
    for rec in exams:
        vec = exam_activations(model, rec, data_dir, tap, heatmap_dir)
        width = len(vec)
        rows.append((rec.exam_id, vec))
    with open(path, "w", newline="") as f:
        cols = width if width is not None else 0
        f.write("exam_id" + "".join(f",a{i}" for i in range(cols)) + "\n")
        for exam_id, vec in rows:
            f.write(exam_id + "".join(f",{v:.6f}" for v in vec) + "\n")
    return path
