"""Prediction/ground-truth matching, FP/FN extraction, COCO metrics and confusion matrices."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .annotations import AnnotatedDataset, Annotation
from .fusion import merge_bb
from .geometry import BoundingBox, intersection_area

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_THRESHOLDS = np.round(np.linspace(0.0, 1.0, 101), 2)
# half-open [lo, hi) ranges on ground-truth box area (px^2)
AREA_RANGES = {
    "all": (0.0, float("inf")),
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, float("inf")),
}
MAX_DETS = 100
BACKGROUND = "background"

TABLE_ROWS = [
    ("IoU=0.50:0.95", "map"),
    ("IoU=0.50", "map_50"),
    ("IoU=0.75", "map_75"),
    ("small", "map_small"),
    ("medium", "map_medium"),
    ("large", "map_large"),
    ("mAR @ IoU=0.50:0.95", "mar"),
]


class ImageMismatchError(ValueError):
    pass


class EmptyGroundTruthError(ValueError):
    pass


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """IoU that reports 0 for two zero-area boxes instead of raising."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _check_images(preds: Sequence[Annotation], gts: AnnotatedDataset) -> None:
    known = {im.id for im in gts.images}
    unknown = sorted({p.image_id for p in preds} - known)
    if unknown:
        raise ImageMismatchError(f"predictions reference images absent from the ground truth: {unknown[:10]}")


def _group(anns: Sequence[Annotation], by_class: bool = True) -> dict:
    out: dict = {}
    for a in anns:
        key = (a.image_id, a.category_id) if by_class else a.image_id
        out.setdefault(key, []).append(a)
    return out


def _by_score(dets: Sequence[Annotation]) -> list[Annotation]:
    return sorted(dets, key=lambda d: -(d.score or 0.0))


# --- matching ---------------------------------------------------------------


@dataclass
class MatchResult:
    true_positives: list[tuple[Annotation, Annotation]] = field(default_factory=list)
    false_positives: list[Annotation] = field(default_factory=list)
    false_negatives: list[Annotation] = field(default_factory=list)


def _greedy(dets: Sequence[Annotation], gts: Sequence[Annotation], iou_threshold: float):
    """Match score-sorted ``dets`` to the free gt of highest IoU >= threshold."""
    taken = [False] * len(gts)
    pairs, unmatched = [], []
    for d in _by_score(dets):
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = box_iou(d.box, g.box)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best < 0:
            unmatched.append(d)
        else:
            taken[best] = True
            pairs.append((d, gts[best]))
    missed = [g for j, g in enumerate(gts) if not taken[j]]
    return pairs, unmatched, missed


def match_detections(
    preds: Sequence[Annotation], gts: AnnotatedDataset, iou_threshold: float = 0.5, confidence_threshold: float = 0.3
) -> MatchResult:
    """Per image and class greedy matching.

    Predictions under ``confidence_threshold`` are discarded before
    matching; every remaining prediction lands in exactly one bucket.
    """
    _check_images(preds, gts)
    kept = [p for p in preds if (p.score or 0.0) >= confidence_threshold]
    pred_groups, gt_groups = _group(kept), _group(gts.annotations)
    result = MatchResult()
    for key in sorted(set(pred_groups) | set(gt_groups)):
        pairs, fps, fns = _greedy(pred_groups.get(key, []), gt_groups.get(key, []), iou_threshold)
        result.true_positives.extend(pairs)
        result.false_positives.extend(fps)
        result.false_negatives.extend(fns)
    return result


@dataclass
class FpFnResult:
    false_positives: list[Annotation]
    false_negatives: list[Annotation]

    def counts(self, class_names: Mapping[int, str]) -> dict:
        def tally(anns):
            c = {name: 0 for name in class_names.values()}
            for a in anns:
                key = class_names.get(a.category_id, str(a.category_id))
                c[key] = c.get(key, 0) + 1
            return c

        return {"FP": tally(self.false_positives), "FN": tally(self.false_negatives)}


def extract_fp_fn(preds: Sequence[Annotation], gts: AnnotatedDataset, confidence_threshold: float = 0.3) -> FpFnResult:
    """Zero-overlap FP/FN extraction.

    A ground-truth box is a false negative only when no prediction (of any
    class) overlaps it at all. A prediction is a false positive when it
    overlaps no ground truth, or only ground truth of other classes.
    """
    _check_images(preds, gts)
    kept = [p for p in preds if (p.score or 0.0) >= confidence_threshold]
    pred_by_image, gt_by_image = _group(kept, by_class=False), _group(gts.annotations, by_class=False)
    fps, fns = [], []
    for image_id in sorted(set(pred_by_image) | set(gt_by_image)):
        ps, gs = pred_by_image.get(image_id, []), gt_by_image.get(image_id, [])
        for g in gs:
            if not any(intersection_area(g.box, p.box) > 0 for p in ps):
                fns.append(g)
        for p in ps:
            overlapping = [g for g in gs if intersection_area(g.box, p.box) > 0]
            if not any(g.category_id == p.category_id for g in overlapping):
                fps.append(p)
    return FpFnResult(fps, fns)


def pool_fp_fn(
    per_model: Mapping[str, Sequence[Annotation]],
    gts: AnnotatedDataset,
    confidence_threshold: float = 0.3,
    merge_threshold: float = 0.3,
) -> FpFnResult:
    """Combine several models' FP/FN sets.

    FPs of all models are pooled and fused with a class-agnostic MergeBB at
    ``merge_threshold``; a ground-truth box stays an FN only if no model's
    prediction touches it.
    """
    fps = []
    for name in sorted(per_model):
        fps.extend(extract_fp_fn(per_model[name], gts, confidence_threshold).false_positives)
    pooled = [p for name in sorted(per_model) for p in per_model[name]]
    fns = extract_fp_fn(pooled, gts, confidence_threshold).false_negatives
    return FpFnResult(merge_bb(fps, "iou", merge_threshold, "all_classes"), fns)


# --- COCO metrics -----------------------------------------------------------


@dataclass
class MetricReport:
    """COCO summary numbers. ``None`` marks a metric with no ground truth to score."""

    map: float | None
    map_50: float | None
    map_75: float | None
    map_small: float | None
    map_medium: float | None
    map_large: float | None
    mar: float | None
    per_class: dict[str, float | None] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {key: getattr(self, key) for _, key in TABLE_ROWS}
        out["per_class_ap"] = dict(self.per_class)
        return out


def _in_range(area: float, rng: tuple[float, float]) -> bool:
    return rng[0] <= area < rng[1]


def _evaluate_cell(dets, gts, area_rng, max_dets):
    """Per (image, class) matching at every IoU threshold.

    Returns scores, matched flags ``[T, D]``, ignore flags ``[T, D]`` and the
    number of non-ignored ground-truth boxes.
    """
    dets = sorted(dets, key=lambda d: -d.score)[:max_dets]
    g_ignore = np.array([not _in_range(g.box.area, area_rng) for g in gts], dtype=bool)
    g_order = np.argsort(g_ignore, kind="mergesort")
    gts = [gts[i] for i in g_order]
    g_ignore = g_ignore[g_order]
    ious = np.array([[box_iou(d.box, g.box) for g in gts] for d in dets]).reshape(len(dets), len(gts))

    T, D = len(IOU_THRESHOLDS), len(dets)
    matched = np.zeros((T, D), dtype=bool)
    ignored = np.zeros((T, D), dtype=bool)
    for t, thr in enumerate(IOU_THRESHOLDS):
        g_taken = np.zeros(len(gts), dtype=bool)
        for di in range(D):
            best_iou, m = min(thr, 1 - 1e-10), -1
            for gi in range(len(gts)):
                if g_taken[gi]:
                    continue
                # once a regular gt is matched, ignored ones (sorted last) cannot win
                if m > -1 and not g_ignore[m] and g_ignore[gi]:
                    break
                if ious[di, gi] < best_iou:
                    continue
                best_iou, m = ious[di, gi], gi
            if m == -1:
                continue
            g_taken[m] = True
            matched[t, di] = True
            ignored[t, di] = g_ignore[m]
    out_of_range = np.array([not _in_range(d.box.area, area_rng) for d in dets], dtype=bool)
    ignored |= ~matched & out_of_range[None, :]
    scores = np.array([d.score for d in dets], dtype=float)
    return scores, matched, ignored, int((~g_ignore).sum())


def _accumulate(cells):
    """Precision/recall over all images of one class and area range.

    Returns ``(ap[T], recall[T])`` or ``(None, None)`` if no gt counts.
    """
    n_gt = sum(c[3] for c in cells)
    if n_gt == 0:
        return None, None
    scores = np.concatenate([c[0] for c in cells]) if cells else np.zeros(0)
    matched = np.concatenate([c[1] for c in cells], axis=1) if cells else np.zeros((len(IOU_THRESHOLDS), 0), bool)
    ignored = np.concatenate([c[2] for c in cells], axis=1) if cells else np.zeros_like(matched)
    order = np.argsort(-scores, kind="mergesort")
    ap = np.zeros(len(IOU_THRESHOLDS))
    rec = np.zeros(len(IOU_THRESHOLDS))
    for t in range(len(IOU_THRESHOLDS)):
        keep = ~ignored[t, order]
        hits = matched[t, order][keep]
        if hits.size == 0:
            continue
        tp = np.cumsum(hits)
        fp = np.cumsum(~hits)
        recall = tp / n_gt
        precision = tp / (tp + fp)
        precision = np.maximum.accumulate(precision[::-1])[::-1]
        idx = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
        q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
        ap[t] = q.mean()
        rec[t] = recall[-1]
    return ap, rec


def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def compute_map(preds: Sequence[Annotation], gts: AnnotatedDataset, max_dets: int = MAX_DETS) -> MetricReport:
    """COCO bbox metrics: AP over IoU 0.50:0.05:0.95 with 101-point interpolation.

    Size buckets use the ground-truth box area (small < 32^2 <= medium < 96^2
    <= large). mAR is the recall at ``max_dets`` detections per image and
    class, averaged over IoU thresholds and classes.
    """
    if not gts.annotations:
        raise EmptyGroundTruthError("cannot compute mAP without ground-truth boxes")
    _check_images(preds, gts)
    if any(p.score is None for p in preds):
        raise ValueError("every prediction needs a confidence score")
    pred_groups, gt_groups = _group(preds), _group(gts.annotations)
    image_ids = sorted(im.id for im in gts.images)
    class_ids = sorted(c.id for c in gts.classes)
    names = gts.class_names()

    ap: dict[str, dict[int, np.ndarray | None]] = {}
    rec_all: dict[int, np.ndarray | None] = {}
    for area_name, rng in AREA_RANGES.items():
        ap[area_name] = {}
        for cls in class_ids:
            cells = [
                _evaluate_cell(pred_groups.get((im, cls), []), gt_groups.get((im, cls), []), rng, max_dets)
                for im in image_ids
            ]
            a, r = _accumulate(cells)
            ap[area_name][cls] = a
            if area_name == "all":
                rec_all[cls] = r

    def summarize(area: str, t: int | None = None) -> float | None:
        vals = [v for v in ap[area].values() if v is not None]
        if not vals:
            return None
        return float(np.mean([v.mean() if t is None else v[t] for v in vals]))

    t50 = int(np.flatnonzero(IOU_THRESHOLDS == 0.5)[0])
    t75 = int(np.flatnonzero(IOU_THRESHOLDS == 0.75)[0])
    return MetricReport(
        map=summarize("all"),
        map_50=summarize("all", t50),
        map_75=summarize("all", t75),
        map_small=summarize("small"),
        map_medium=summarize("medium"),
        map_large=summarize("large"),
        mar=_mean(r.mean() if r is not None else None for r in rec_all.values()),
        per_class={names[c]: (None if ap["all"][c] is None else float(ap["all"][c].mean())) for c in class_ids},
    )


def format_metric_table(reports: Mapping[str, MetricReport]) -> str:
    """Aligned text table, one column per model, rows as in the usual mAP/mAR summary."""
    names = list(reports)
    width = max([len(label) for label, _ in TABLE_ROWS] + [4])
    col = max([len(n) for n in names] + [6])
    lines = ["mAP".ljust(width) + "".join(f"  {n:>{col}}" for n in names)]
    for label, key in TABLE_ROWS:
        cells = []
        for n in names:
            v = getattr(reports[n], key)
            cells.append(f"  {('n/a' if v is None else f'{v:.3f}'):>{col}}")
        lines.append(label.ljust(width) + "".join(cells))
    return "\n".join(lines) + "\n"


# --- confusion matrix -------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """Rows are ground-truth classes, columns predicted classes; last index is background."""

    labels: list[str]
    matrix: np.ndarray

    def to_dict(self) -> dict:
        return {"labels": self.labels, "matrix": self.matrix.tolist()}


def confusion_matrix(
    preds: Sequence[Annotation],
    gts: AnnotatedDataset,
    iou_threshold: float = 0.5,
    confidence_threshold: float = 0.3,
    normalize: str = "none",
) -> ConfusionMatrix:
    """Class confusion with a background row/column.

    Predictions are matched class-agnostically (score order, highest IoU
    first). Missed ground truth counts as ``(class, background)``, unmatched
    predictions as ``(background, class)``. ``normalize`` is ``row``,
    ``column`` or ``none``; all-zero rows/columns stay zero.
    """
    if normalize not in ("row", "column", "none"):
        raise ValueError(f"normalize must be row, column or none, got {normalize!r}")
    _check_images(preds, gts)
    class_ids = sorted(c.id for c in gts.classes)
    index = {c: i for i, c in enumerate(class_ids)}
    names = gts.class_names()
    bg = len(class_ids)
    m = np.zeros((bg + 1, bg + 1), dtype=float)

    kept = [p for p in preds if (p.score or 0.0) >= confidence_threshold]
    pred_by_image, gt_by_image = _group(kept, by_class=False), _group(gts.annotations, by_class=False)
    for image_id in sorted(set(pred_by_image) | set(gt_by_image)):
        pairs, fps, fns = _greedy(pred_by_image.get(image_id, []), gt_by_image.get(image_id, []), iou_threshold)
        for p, g in pairs:
            m[index[g.category_id], index[p.category_id]] += 1
        for p in fps:
            m[bg, index[p.category_id]] += 1
        for g in fns:
            m[index[g.category_id], bg] += 1

    if normalize == "row":
        sums = m.sum(axis=1, keepdims=True)
        m = np.divide(m, sums, out=np.zeros_like(m), where=sums > 0)
    elif normalize == "column":
        sums = m.sum(axis=0, keepdims=True)
        m = np.divide(m, sums, out=np.zeros_like(m), where=sums > 0)
    return ConfusionMatrix([names[c] for c in class_ids] + [BACKGROUND], m)
