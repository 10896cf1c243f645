"""Consensus ground truth from several models' predictions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .annotations import AnnotatedDataset, Annotation, ClassLabel, ImageRecord
from .evaluation import ImageMismatchError, box_iou


class InsufficientModelsError(ValueError):
    pass


@dataclass(frozen=True)
class ConsensusConfig:
    confidence_min: float = 0.5
    iou_min: float = 0.5
    min_models: int = 2

    def __post_init__(self):
        if not (0.0 <= self.confidence_min <= 1.0 and 0.0 <= self.iou_min <= 1.0):
            raise ValueError("confidence_min and iou_min must lie in [0, 1]")
        if self.min_models < 1:
            raise ValueError("min_models must be >= 1")


def seed_order(model: str, det: Annotation):
    """Sort key for candidates: most confident first, ties broken by box then model."""
    return (-det.score, det.box.as_tuple(), model)


def agreement_groups(candidates: Sequence[tuple[str, Annotation]], iou_min: float) -> list[list[tuple[str, Annotation]]]:
    """Greedy seed grouping of same-image, same-class candidates.

    The most confident unused candidate seeds a group; every other model
    contributes at most one unused candidate, the one with the highest IoU
    to the seed (>= ``iou_min``). All members are consumed.
    """
    ordered = sorted(candidates, key=lambda md: seed_order(*md))
    used = [False] * len(ordered)
    groups = []
    for i, (model, seed) in enumerate(ordered):
        if used[i]:
            continue
        used[i] = True
        group = [(model, seed)]
        best: dict[str, tuple[float, int]] = {}
        for j, (other_model, det) in enumerate(ordered):
            if used[j] or other_model == model:
                continue
            v = box_iou(seed.box, det.box)
            if v >= iou_min and (other_model not in best or v > best[other_model][0]):
                best[other_model] = (v, j)
        for other_model in sorted(best):
            j = best[other_model][1]
            used[j] = True
            group.append(ordered[j])
        groups.append(group)
    return groups


def build_consensus(
    per_model: Mapping[str, Sequence[Annotation]],
    images: Sequence[ImageRecord],
    classes: Sequence[ClassLabel],
    cfg: ConsensusConfig = ConsensusConfig(),
) -> AnnotatedDataset:
    """Keep a box when enough distinct models agree on its class and location.

    Predictions under ``cfg.confidence_min`` are dropped; the rest are
    grouped per image and class by :func:`agreement_groups`. A group backed
    by at least ``cfg.min_models`` models yields one unscored annotation
    carrying the seed's box.
    """
    if len(per_model) < cfg.min_models:
        raise InsufficientModelsError(f"need predictions from at least {cfg.min_models} models, got {len(per_model)}")
    known = {im.id for im in images}
    buckets: dict[tuple[int, int], list[tuple[str, Annotation]]] = {}
    for model, dets in per_model.items():
        for d in dets:
            if d.image_id not in known:
                raise ImageMismatchError(f"model {model!r} predicts on unknown image {d.image_id}")
            if d.score is not None and d.score >= cfg.confidence_min:
                buckets.setdefault((d.image_id, d.category_id), []).append((model, d))

    annotations = []
    for (image_id, category_id) in sorted(buckets):
        for group in agreement_groups(buckets[(image_id, category_id)], cfg.iou_min):
            if len({m for m, _ in group}) >= cfg.min_models:
                annotations.append(Annotation(image_id, group[0][1].box, category_id))
    return AnnotatedDataset(sorted(images, key=lambda r: r.id), annotations, list(classes)).renumbered()
