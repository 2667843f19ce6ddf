"""Segmentation metrics: confusion matrix, IoU groups, HM, confidence statistics."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

N_CONF_BINS = 10


def harmonic_mean(b: float, n: float) -> float:
    if b < 0 or n < 0:
        raise ValueError("harmonic mean needs non-negative inputs")
    if b + n == 0:
        return 0.0
    return 2.0 * b * n / (b + n)


def confusion_matrix(truth: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns are predictions."""
    idx = np.asarray(truth, dtype=np.int64) * num_classes + np.asarray(pred, dtype=np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def per_class_iou(confusion: np.ndarray) -> list[float | None]:
    """IoU per label; ``None`` where the class is absent from truth and prediction."""
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    out = []
    for t, p, n in zip(tp, fp, fn):
        denom = t + p + n
        out.append(None if denom == 0 else float(t / denom))
    return out


def _group_mean(ious: list, labels: list[int]) -> float:
    vals = [ious[c] for c in labels if ious[c] is not None]
    return 100.0 * float(np.mean(vals)) if vals else math.nan


@dataclass
class MetricsReport:
    """mIoU fields are percentages; IoU entries are fractions or None.

    ``mean_confidence`` averages the max probability over every point, the
    ``novel_*`` pair only over points predicted as a novel class.
    ``class_frequency`` is the predicted-label share per label and
    ``class_frequency_cv`` its population CV over the novel labels.
    """

    confusion: list
    per_class_iou: list
    miou_b: float
    miou_n: float
    miou_a: float
    hm: float
    mean_confidence: float
    high_conf_fraction: float
    novel_mean_confidence: float
    novel_high_conf_fraction: float
    confidence_hist: list
    class_frequency: list
    class_frequency_cv: float
    n_points: int

    def to_dict(self) -> dict:
        return {k: _jsonable(v) for k, v in asdict(self).items()}


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    return v


def coefficient_of_variation(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0 or values.mean() == 0:
        return math.nan
    return float(values.std() / values.mean())


def report_from_predictions(truths, preds, confidences, k_base: int, k_novel: int) -> MetricsReport:
    """Build a report from per-scene label arrays and max-probability arrays.

    Scenes are accumulated in the given order. Background (label 0) is excluded
    from every mIoU group.
    """
    num = k_base + k_novel + 1
    conf_mat = np.zeros((num, num), dtype=np.int64)
    hist = np.zeros(N_CONF_BINS, dtype=np.int64)
    freq = np.zeros(num, dtype=np.int64)
    conf_sum, high, total = 0.0, 0, 0
    nconf_sum, nhigh, ntotal = 0.0, 0, 0
    for t, p, c in zip(truths, preds, confidences):
        conf_mat += confusion_matrix(t, p, num)
        c = np.asarray(c, dtype=np.float64)
        hist += np.histogram(c, bins=N_CONF_BINS, range=(0.0, 1.0))[0]
        freq += np.bincount(np.asarray(p, dtype=np.int64), minlength=num)
        conf_sum += float(c.sum())
        high += int(np.sum(c > 0.9))
        total += c.size
        is_novel = np.asarray(p) > k_base
        nconf_sum += float(c[is_novel].sum())
        nhigh += int(np.sum(c[is_novel] > 0.9))
        ntotal += int(is_novel.sum())
    ious = per_class_iou(conf_mat)
    base = list(range(1, k_base + 1))
    novel = list(range(k_base + 1, num))
    b = _group_mean(ious, base)
    n = _group_mean(ious, novel)
    hm = harmonic_mean(b, n) if math.isfinite(b) and math.isfinite(n) else math.nan
    frac = freq / total if total else np.zeros(num)
    return MetricsReport(
        confusion=conf_mat.tolist(),
        per_class_iou=ious,
        miou_b=b,
        miou_n=n,
        miou_a=_group_mean(ious, base + novel),
        hm=hm,
        mean_confidence=conf_sum / total if total else math.nan,
        high_conf_fraction=high / total if total else math.nan,
        novel_mean_confidence=nconf_sum / ntotal if ntotal else math.nan,
        novel_high_conf_fraction=nhigh / ntotal if ntotal else math.nan,
        confidence_hist=hist.tolist(),
        class_frequency=frac.tolist(),
        class_frequency_cv=coefficient_of_variation(frac[novel]) if novel else math.nan,
        n_points=int(total),
    )


def predict_scene(model, scene) -> tuple[np.ndarray, np.ndarray]:
    """Predicted labels and max probabilities; argmax ties go to the lowest column."""
    probs = model.predict_proba(scene.feats)
    cols = probs.argmax(axis=1)
    return model.cols_to_labels(cols), probs[np.arange(scene.n), cols]


def evaluate(model, scenes, k_base: int, k_novel: int, workers: int = 1) -> MetricsReport:
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda s: predict_scene(model, s), scenes))
    else:
        results = [predict_scene(model, s) for s in scenes]
    return report_from_predictions([s.labels for s in scenes], [r[0] for r in results],
                                   [r[1] for r in results], k_base, k_novel)
