"""Metrics: accuracy, segment/point F1, confusion matrices, DScore, memorization rate."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from gadlab.errors import AlignmentError, DataError, UndefinedMetric

Segment = tuple[int, int, int]  # (start, end inclusive, class)
EPS = 1e-12


@dataclass
class MetricReport:
    top1: float = float("nan")
    frame_accuracy: float = float("nan")
    segment_f1: float = float("nan")
    point_f1: float = float("nan")
    dscore: float = float("nan")
    memorization_rate: float = float("nan")
    fps: float = float("nan")
    forwards_per_sample: float = float("nan")

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def accuracies(preds: Sequence[int], gts: Sequence[int]) -> tuple[float, float]:
    """(top-1, frame accuracy); both are the exact-match fraction over aligned entries."""
    p, g = np.asarray(preds), np.asarray(gts)
    if p.shape != g.shape:
        raise AlignmentError(f"{p.shape[0] if p.ndim else 0} predictions vs {g.shape[0] if g.ndim else 0} labels")
    if p.size == 0:
        raise AlignmentError("empty prediction sequence")
    acc = float((p == g).mean())
    return acc, acc


def segments_from_frames(labels: Sequence[int], background_id: int) -> list[Segment]:
    """Maximal runs of equal non-background labels."""
    out: list[Segment] = []
    labels = [int(x) for x in labels]
    i = 0
    while i < len(labels):
        j = i
        while j + 1 < len(labels) and labels[j + 1] == labels[i]:
            j += 1
        if labels[i] != background_id:
            out.append((i, j, labels[i]))
        i = j + 1
    return out


def _check(segs: Iterable[Segment]) -> list[Segment]:
    segs = [tuple(int(v) for v in s) for s in segs]
    for s in segs:
        if s[1] < s[0]:
            raise DataError(f"malformed segment {s}: end < start")
    return segs


def iou(a: Segment, b: Segment) -> float:
    """Temporal IoU of inclusive frame ranges."""
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def _f1(tp: int, n_pred: int, n_gt: int) -> float:
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if tp == 0:
        return 0.0
    prec, rec = tp / n_pred, tp / n_gt
    return 2 * prec * rec / (prec + rec)


def _max_matching(ok: np.ndarray) -> int:
    """Size of a maximum one-to-one matching over the boolean compatibility matrix."""
    if ok.size == 0 or not ok.any():
        return 0
    rows, cols = linear_sum_assignment(-ok.astype(float))
    return int(ok[rows, cols].sum())


def _greedy_segments(pred: list[Segment], gt: list[Segment], thr: float) -> int:
    used = set()
    tp = 0
    for p in sorted(pred):
        best, best_iou = None, thr
        for k, g in enumerate(gt):
            if k in used or g[2] != p[2]:
                continue
            v = iou(p, g)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = k, v
        if best is not None:
            used.add(best)
            tp += 1
    return tp


def segment_f1(pred: Iterable[Segment], gt: Iterable[Segment], iou_thr: float = 0.1,
               matching: str = "optimal") -> float:
    """F1 over same-class segment pairs with IoU >= threshold, matched one-to-one.

    ``matching="optimal"`` maximizes the number of matched pairs per class;
    ``"greedy"`` takes predictions in temporal order and pairs each with the
    highest-IoU unmatched ground-truth segment.
    """
    pred, gt = _check(pred), _check(gt)
    if matching == "greedy":
        tp = _greedy_segments(pred, gt, iou_thr)
    elif matching == "optimal":
        tp = 0
        for c in {s[2] for s in pred} & {s[2] for s in gt}:
            ps = [s for s in pred if s[2] == c]
            gs = [s for s in gt if s[2] == c]
            ok = np.array([[iou(p, g) >= iou_thr for g in gs] for p in ps], dtype=bool)
            tp += _max_matching(ok)
    else:
        raise ValueError(f"unknown matching {matching!r}")
    return _f1(tp, len(pred), len(gt))


def point_f1(pred: Iterable[Segment], gt: Iterable[Segment], tol: int = 1) -> float:
    """F1 over action starts: a predicted start matches one unmatched same-class GT start within ``tol``.

    Matching maximizes the number of pairs (one-to-one).
    """
    pred, gt = _check(pred), _check(gt)
    tp = 0
    for c in {s[2] for s in pred} & {s[2] for s in gt}:
        ps = [s[0] for s in pred if s[2] == c]
        gs = [s[0] for s in gt if s[2] == c]
        ok = np.abs(np.subtract.outer(ps, gs)) <= tol
        tp += _max_matching(ok)
    return _f1(tp, len(pred), len(gt))


def episode_f1(pred_frames: Sequence[int], gt_frames: Sequence[int], background_id: int,
               iou_thr: float = 0.1, tol: int = 1) -> tuple[float, float]:
    if len(pred_frames) != len(gt_frames):
        raise AlignmentError("frame sequences differ in length")
    ps = segments_from_frames(pred_frames, background_id)
    gs = segments_from_frames(gt_frames, background_id)
    return segment_f1(ps, gs, iou_thr), point_f1(ps, gs, tol)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    background_id: int | None = None

    @property
    def n(self) -> int:
        return self.counts.shape[0]


def confusion(preds: Sequence[int], gts: Sequence[int], n_classes: int,
              background_id: int | None = None) -> ConfusionMatrix:
    p, g = np.asarray(preds, dtype=np.int64), np.asarray(gts, dtype=np.int64)
    if p.shape != g.shape:
        raise AlignmentError("prediction and label sequences differ in length")
    if p.size and (min(p.min(), g.min()) < 0 or max(p.max(), g.max()) >= n_classes):
        raise DataError(f"class id outside [0, {n_classes})")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (g, p), 1)
    return ConfusionMatrix(m, background_id)


def dscore(cm: ConfusionMatrix | np.ndarray, background_id: int | None = None,
           drop_background_column: bool = True, eps: float = EPS) -> float:
    """Mean row entropy of the off-diagonal confusion mass.

    Rows that are background, absent from the ground truth, or carry no
    off-diagonal mass are excluded; no eligible row raises ``UndefinedMetric``.
    """
    if isinstance(cm, ConfusionMatrix):
        background_id = cm.background_id if background_id is None else background_id
        c = cm.counts
    else:
        c = np.asarray(cm)
    c = np.array(c, dtype=float)
    present = c.sum(axis=1) > 0
    np.fill_diagonal(c, 0.0)
    if background_id is not None and drop_background_column:
        c[:, background_id] = 0.0
    mass = c.sum(axis=1)
    rows = present & (mass > 0)
    if background_id is not None:
        rows[background_id] = False
    if not rows.any():
        raise UndefinedMetric("no class has off-diagonal confusion mass")
    p = c[rows] / mass[rows, None]
    h = -(p * np.log(p + eps)).sum(axis=1)
    return float(h.mean())


def memorization_rate(texts: Sequence[str], train_labels: Iterable[str]) -> float:
    """Fraction of generated strings that exactly match a training label surface."""
    known = set(train_labels)
    if not texts:
        raise UndefinedMetric("no generated outputs")
    return sum(t in known for t in texts) / len(texts)


def write_metric_rows(rows: Iterable[tuple[str, int, str, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment", "seed", "metric", "value"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(float(r[3]))])


def write_confusion(cm: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gt\\pred"] + list(range(cm.n)))
        for i, row in enumerate(cm.counts):
            w.writerow([i] + row.tolist())
